#include "promptrestore/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <ostream>
#include <set>

namespace promptrestore {

namespace {

std::string task_list(const std::vector<DegradationType>& tasks) {
  std::string out;
  for (auto t : tasks) out += (out.empty() ? "" : "+") + std::string(to_string(t));
  return out;
}

bool contains(const std::vector<DegradationType>& tasks, DegradationType t) {
  return std::find(tasks.begin(), tasks.end(), t) != tasks.end();
}

Image map_to_image(const torch::Tensor& map) {
  const auto m = map.detach().to(torch::kFloat32).contiguous();
  Image image(static_cast<int>(m.size(0)), static_cast<int>(m.size(1)));
  const float* src = m.data_ptr<float>();
  for (int c = 0; c < Image::kChannels; ++c) std::copy(src, src + m.numel(), image.plane(c).begin());
  return image;
}

double mean_abs_difference(const Image& a, const Image& b) {
  require_same_shape(a, b, "distance operands");
  double sum = 0.0;
  const auto va = a.values();
  const auto vb = b.values();
  for (size_t i = 0; i < va.size(); ++i) sum += std::abs(static_cast<double>(va[i]) - vb[i]);
  return sum / static_cast<double>(va.size());
}

std::pair<double, double> mean_and_std(const std::vector<double>& values) {
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / static_cast<double>(values.size()))};
}

std::vector<Image> read_image_directory(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    auto ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw NotFound("no images in " + dir.string());
  std::vector<Image> out;
  for (const auto& f : files) out.push_back(read_image(f));
  return out;
}

TextEncoderBundle prepare_text_encoder(const ExperimentPlan& plan, std::ostream* log) {
  if (!plan.text_encoder.empty()) return load_text_encoder(plan.text_encoder);
  auto corpus = InstructionCorpus::generate(plan.corpus_seed, plan.corpus_per_category);
  const auto cfg = plan.preset == "paper" ? TextEncoderConfig::paper(corpus.vocab_size())
                                          : TextEncoderConfig::tiny(corpus.vocab_size());
  FinetuneOptions options;
  options.steps = plan.text_encoder_steps;
  options.seed = plan.corpus_seed;
  options.log_every = 0;
  if (log) *log << "fine-tuning text encoder for " << options.steps << " steps\n" << std::flush;
  auto result = finetune(corpus, cfg, options);
  auto centroids = compute_centroids(result.encoder, corpus, Split::train);
  return {result.encoder, std::move(corpus), std::move(centroids)};
}

}  // namespace

nlohmann::json EvalColumn::to_json() const {
  nlohmann::json j{{"label", label}, {"task", std::string(to_string(task))}};
  if (sigma_255) j["sigma_255"] = *sigma_255;
  if (!directory.empty()) j["directory"] = directory.string();
  return j;
}

EvalColumn EvalColumn::from_json(const nlohmann::json& j) {
  EvalColumn c;
  c.task = parse_degradation(j.at("task").get<std::string>());
  if (j.contains("sigma_255")) c.sigma_255 = j.at("sigma_255").get<double>();
  c.directory = j.value("directory", std::string{});
  c.label = j.value("label", std::string(to_string(c.task)));
  if (c.sigma_255 && c.task != DegradationType::noise) throw InvalidArgument("sigma_255 applies to noise columns only");
  return c;
}

std::vector<EvalColumn> default_columns(const std::vector<DegradationType>& tasks) {
  std::vector<EvalColumn> out;
  for (auto t : kAllDegradations) {
    if (!contains(tasks, t)) continue;
    if (t == DegradationType::noise) {
      for (double s : {15.0, 25.0, 50.0}) {
        out.push_back({"sigma=" + std::to_string(static_cast<int>(s)), t, s, {}});
      }
    } else {
      out.push_back({std::string(to_string(t)), t, std::nullopt, {}});
    }
  }
  return out;
}

void ExperimentPlan::validate() const {
  if (tasks.empty()) throw InvalidArgument("plan task set must not be empty");
  if (std::set<DegradationType>(tasks.begin(), tasks.end()).size() != tasks.size()) {
    throw InvalidArgument("plan task set has duplicates");
  }
  if (repeats < 1 || static_cast<size_t>(repeats) != seeds.size()) {
    throw InvalidArgument("plan repeats must equal the number of seeds");
  }
  if (experiments.empty()) throw InvalidArgument("plan lists no experiments");
  for (const auto& e : experiments) {
    if (std::find(std::begin(kExperimentNames), std::end(kExperimentNames), e) == std::end(kExperimentNames)) {
      throw InvalidArgument("unknown experiment '" + e + "'");
    }
  }
  (void)BackboneConfig::preset(preset);
  train.validate();
  if (train_images < 1 || eval_images < 1 || image_size < 16) throw InvalidArgument("plan data sizes too small");
  if (stability_repeats < 1 || selectivity_trials < 1) throw InvalidArgument("repeat counts must be >= 1");
}

nlohmann::json ExperimentPlan::to_json() const {
  std::vector<std::string> task_names;
  for (auto t : tasks) task_names.emplace_back(to_string(t));
  nlohmann::json cols = nlohmann::json::array();
  for (const auto& c : eval_sets) cols.push_back(c.to_json());
  return {{"name", name},
          {"tasks", task_names},
          {"preset", preset},
          {"train", train.to_json()},
          {"eval_sets", cols},
          {"repeats", repeats},
          {"seeds", seeds},
          {"experiments", experiments},
          {"train_images", train_images},
          {"eval_images", eval_images},
          {"image_size", image_size},
          {"data_seed", data_seed},
          {"train_image_dir", train_image_dir.string()},
          {"evaluate_on_train_images", evaluate_on_train_images},
          {"text_encoder", text_encoder.string()},
          {"corpus_per_category", corpus_per_category},
          {"corpus_seed", corpus_seed},
          {"text_encoder_steps", text_encoder_steps},
          {"stability_repeats", stability_repeats},
          {"selectivity_trials", selectivity_trials},
          {"images_per_cell", images_per_cell},
          {"output_dir", output_dir.string()}};
}

ExperimentPlan ExperimentPlan::from_json(const nlohmann::json& j) {
  ExperimentPlan p;
  try {
    p.name = j.value("name", p.name);
    if (j.contains("tasks")) {
      p.tasks.clear();
      for (const auto& t : j.at("tasks")) p.tasks.push_back(parse_degradation(t.get<std::string>()));
    }
    p.preset = j.value("preset", p.preset);
    if (j.contains("train")) p.train = TrainConfig::from_json(j.at("train"));
    p.train.tasks = p.tasks;
    if (j.contains("eval_sets")) {
      for (const auto& c : j.at("eval_sets")) p.eval_sets.push_back(EvalColumn::from_json(c));
    }
    p.seeds = j.value("seeds", p.seeds);
    p.repeats = j.value("repeats", static_cast<int>(p.seeds.size()));
    p.experiments = j.value("experiments", p.experiments);
    p.train_images = j.value("train_images", p.train_images);
    p.eval_images = j.value("eval_images", p.eval_images);
    p.image_size = j.value("image_size", p.image_size);
    p.data_seed = j.value("data_seed", p.data_seed);
    p.train_image_dir = j.value("train_image_dir", std::string{});
    p.evaluate_on_train_images = j.value("evaluate_on_train_images", p.evaluate_on_train_images);
    p.text_encoder = j.value("text_encoder", std::string{});
    p.corpus_per_category = j.value("corpus_per_category", p.corpus_per_category);
    p.corpus_seed = j.value("corpus_seed", p.corpus_seed);
    p.text_encoder_steps = j.value("text_encoder_steps", p.text_encoder_steps);
    p.stability_repeats = j.value("stability_repeats", p.stability_repeats);
    p.selectivity_trials = j.value("selectivity_trials", p.selectivity_trials);
    p.images_per_cell = j.value("images_per_cell", p.images_per_cell);
    p.output_dir = j.value("output_dir", p.output_dir.string());
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("malformed plan: ") + e.what());
  }
  p.validate();
  return p;
}

ExperimentPlan ExperimentPlan::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFound("cannot open plan " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument("plan " + path.string() + " is not JSON: " + e.what());
  }
  return from_json(j);
}

std::string ExperimentPlan::config_hash() const {
  uint64_t h = 14695981039346656037ull;
  for (unsigned char c : to_json().dump()) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::optional<EvalRecord> ResultTable::average(const Row& row) {
  double psnr_sum = 0.0, ssim_sum = 0.0;
  int n = 0, images = 0;
  for (const auto& cell : row.cells) {
    if (!cell) continue;
    psnr_sum += cell->psnr;
    ssim_sum += cell->ssim;
    images += cell->n_images;
    ++n;
  }
  if (n == 0) return std::nullopt;
  return EvalRecord{"average", "", psnr_sum / n, ssim_sum / n, images};
}

nlohmann::json ResultTable::to_json() const {
  nlohmann::json rows_json = nlohmann::json::array();
  for (const auto& row : rows) {
    nlohmann::json cells = nlohmann::json::array();
    for (const auto& cell : row.cells) cells.push_back(cell ? cell->to_json() : nlohmann::json(nullptr));
    const auto avg = average(row);
    rows_json.push_back({{"label", row.label}, {"cells", cells}, {"average", avg ? avg->to_json() : nullptr}});
  }
  return {{"title", title}, {"columns", columns}, {"rows", rows_json}};
}

std::string ResultTable::render() const {
  std::vector<std::string> header{""};
  header.insert(header.end(), columns.begin(), columns.end());
  header.push_back("Average");
  std::vector<std::vector<std::string>> body;
  for (const auto& row : rows) {
    std::vector<std::string> line{row.label};
    for (const auto& cell : row.cells) line.push_back(cell ? format_score(cell->psnr, cell->ssim) : "-");
    const auto avg = average(row);
    line.push_back(avg ? format_score(avg->psnr, avg->ssim) : "-");
    body.push_back(std::move(line));
  }
  return title + "\n" + render_table(header, body);
}

nlohmann::json Report::to_json() const {
  nlohmann::json tables_json = nlohmann::json::array();
  for (const auto& t : tables) tables_json.push_back(t.to_json());
  return {{"experiment", experiment}, {"plan", plan_name}, {"config_hash", config_hash},
          {"seeds", seeds},           {"tables", tables_json}, {"details", details}};
}

std::string Report::render() const {
  std::string out = experiment + " [" + plan_name + "] config " + config_hash + " seeds";
  for (auto s : seeds) out += " " + std::to_string(s);
  out += "\n\n";
  for (const auto& t : tables) out += t.render() + "\n";
  return out;
}

std::vector<ChangeRow> confirmatory_single(RestorationNet& model, GuidanceProvider& guidance, const ImagePair& pair,
                                           const std::vector<Instruction>& prompts) {
  std::vector<ChangeRow> rows;
  for (const auto& prompt : prompts) {
    auto restored = restore(model, guidance, pair.degraded, prompt.text);
    rows.push_back({prompt.text, prompt.category, mean_abs_difference(restored, pair.degraded),
                    psnr(restored, pair.clean), std::move(restored)});
  }
  std::stable_sort(rows.begin(), rows.end(),
                   [](const ChangeRow& a, const ChangeRow& b) { return a.distance_to_input > b.distance_to_input; });
  return rows;
}

Image partial_target(const Image& clean, const std::vector<SeededSpec>& specs, DegradationType removed) {
  std::vector<SeededSpec> kept;
  for (const auto& s : specs) {
    if (s.spec.kind() != removed) kept.push_back(s);
  }
  return compose_seeded(clean, kept);
}

std::vector<SelectiveRow> confirmatory_multi(RestorationNet& model, GuidanceProvider& guidance, const Image& clean,
                                             const std::vector<SeededSpec>& specs,
                                             const std::vector<Instruction>& prompts) {
  if (specs.empty()) throw InvalidArgument("confirmatory_multi needs a composed degradation");
  const auto degraded = compose_seeded(clean, specs);
  std::map<DegradationType, Image> targets;
  for (const auto& s : specs) targets.emplace(s.spec.kind(), partial_target(clean, specs, s.spec.kind()));
  std::vector<SelectiveRow> rows;
  for (const auto& prompt : prompts) {
    SelectiveRow row{prompt.text, prompt.category, restore(model, guidance, degraded, prompt.text), {}, {}};
    for (const auto& [kind, target] : targets) row.psnr_to_target[kind] = psnr(row.restored, target);
    torch::NoGradGuard no_grad;
    const bool was_training = model->is_training();
    model->eval();
    row.attention_maps = model->attention_maps(to_tensor(degraded), guidance.single(prompt.text).tensor().unsqueeze(0));
    model->train(was_training);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<SelectivityTrial> selectivity_trials(RestorationNet& model, GuidanceProvider& guidance,
                                                 const std::vector<Image>& cleans,
                                                 const std::vector<DegradationType>& tasks, int n_trials, Rng& rng,
                                                 Split prompt_split) {
  if (tasks.size() < 2) throw InvalidArgument("selectivity needs at least two tasks");
  if (cleans.empty()) throw InvalidArgument("selectivity needs clean images");
  const auto& corpus = guidance.corpus();
  std::vector<SelectivityTrial> trials;
  for (int n = 0; n < n_trials; ++n) {
    const auto& clean = cleans[uniform_index(rng, cleans.size())];
    const size_t i = uniform_index(rng, tasks.size());
    size_t j = uniform_index(rng, tasks.size() - 1);
    if (j >= i) ++j;
    const auto prompted = tasks[i];
    const auto other = tasks[j];
    auto spec_a = sample_spec(prompted, rng);
    auto spec_b = sample_spec(other, rng);
    auto ordered = physical_order({spec_a, spec_b});
    std::vector<SeededSpec> specs;
    for (auto& s : ordered) specs.push_back({s, rng()});
    const auto degraded = compose_seeded(clean, specs);
    const auto target = partial_target(clean, specs, prompted);
    const auto& matched_prompt = corpus.sample(prompted, prompt_split, rng);
    const auto& mismatched_prompt = corpus.sample(other, prompt_split, rng);
    trials.push_back({prompted, other, psnr(restore(model, guidance, degraded, matched_prompt.text), target),
                      psnr(restore(model, guidance, degraded, mismatched_prompt.text), target)});
  }
  return trials;
}

nlohmann::json StabilityReport::to_json() const {
  return {{"psnr", psnr},           {"ssim", ssim},           {"psnr_mean", psnr_mean},
          {"psnr_std", psnr_std},   {"ssim_mean", ssim_mean}, {"ssim_std", ssim_std}};
}

StabilityReport stability_repeat(RestorationNet& model, GuidanceProvider& guidance, std::vector<ImagePair> pairs,
                                 int n, Rng& rng, Split split) {
  if (n < 1) throw InvalidArgument("stability needs n >= 1");
  if (pairs.empty()) throw InvalidArgument("stability needs evaluation pairs");
  StabilityReport report;
  for (int r = 0; r < n; ++r) {
    for (auto& pair : pairs) pair.instruction = guidance.corpus().sample(pair.instruction.category, split, rng);
    const auto rec = evaluate(model, guidance, pairs, "stability");
    report.psnr.push_back(rec.psnr);
    report.ssim.push_back(rec.ssim);
  }
  std::tie(report.psnr_mean, report.psnr_std) = mean_and_std(report.psnr);
  std::tie(report.ssim_mean, report.ssim_std) = mean_and_std(report.ssim);
  return report;
}

std::vector<std::vector<DegradationType>> task_subsets(const std::vector<DegradationType>& tasks) {
  std::vector<std::vector<DegradationType>> out;
  const size_t n = tasks.size();
  for (size_t size = 1; size <= n; ++size) {
    for (uint32_t mask = 1; mask < (1u << n); ++mask) {
      if (static_cast<size_t>(std::popcount(mask)) != size) continue;
      std::vector<DegradationType> subset;
      for (size_t k = 0; k < n; ++k) {
        if (mask & (1u << k)) subset.push_back(tasks[k]);
      }
      out.push_back(std::move(subset));
    }
  }
  return out;
}

Harness::Harness(ExperimentPlan plan, std::ostream* log) : Harness(plan, prepare_text_encoder(plan, log), log) {}

Harness::Harness(ExperimentPlan plan, TextEncoderBundle encoder, std::ostream* log)
    : plan_(std::move(plan)), log_(log) {
  plan_.validate();
  guidance_ = std::make_unique<GuidanceProvider>(encoder.encoder, std::move(encoder.corpus),
                                                 plan_.train.finetune_text_encoder);
  if (!plan_.train_image_dir.empty()) {
    train_images_ = read_image_directory(plan_.train_image_dir);
  } else {
    Rng rng(plan_.data_seed);
    train_images_ = synthetic_clean_images(plan_.train_images, plan_.image_size, plan_.image_size, rng);
  }
  if (plan_.evaluate_on_train_images) {
    eval_images_ = train_images_;
  } else {
    Rng rng(plan_.data_seed + 1);
    eval_images_ = synthetic_clean_images(plan_.eval_images, plan_.image_size, plan_.image_size, rng);
  }
  columns_ = plan_.eval_sets.empty() ? default_columns(plan_.tasks) : plan_.eval_sets;
}

std::vector<ImagePair> Harness::column_pairs(size_t column) {
  const auto& col = columns_.at(column);
  const auto& corpus = guidance_->corpus();
  Rng rng(plan_.data_seed * 1000003ull + 17 + column);
  std::vector<ImagePair> pairs;
  if (!col.directory.empty()) {
    for (auto& named : load_pair_directory(col.directory)) {
      pairs.push_back({std::move(named.degraded), std::move(named.clean), {},
                       corpus.sample(col.task, Split::heldout, rng)});
    }
    return pairs;
  }
  for (const auto& clean : eval_images_) {
    const auto spec = col.sigma_255 ? DegradationSpec::noise(*col.sigma_255 / 255.0) : sample_spec(col.task, rng);
    auto degraded = apply(clean, spec, rng);
    pairs.push_back({std::move(degraded), clean, {spec}, corpus.sample(col.task, Split::heldout, rng)});
  }
  return pairs;
}

RestorationNet Harness::train_model(const std::vector<DegradationType>& tasks, uint64_t seed, bool sgi_enabled) {
  auto backbone = BackboneConfig::preset(plan_.preset);
  backbone.sgi_enabled = sgi_enabled;
  backbone.d_text = guidance_->d_model();
  TrainConfig cfg = plan_.train;
  cfg.tasks = tasks;
  cfg.seed = seed;
  auto state = make_train_state(backbone, cfg, *guidance_);
  SyntheticPairStream stream(train_images_, cfg.task_mix(), guidance_->corpus(), cfg.patch, cfg.batch_size);
  if (log_) {
    *log_ << "training " << task_list(tasks) << " seed " << seed << " sgi " << (sgi_enabled ? "on" : "off") << " for "
          << cfg.steps << " steps\n"
          << std::flush;
  }
  FitHooks hooks;
  hooks.log_stream = log_;
  fit(state, *guidance_, stream, hooks);
  state.model->eval();
  return state.model;
}

RestorationNet Harness::model_for(const std::vector<DegradationType>& tasks, uint64_t seed, bool sgi_enabled) {
  auto sorted = tasks;
  std::sort(sorted.begin(), sorted.end());
  const auto key = task_list(sorted) + "|" + std::to_string(seed) + "|" + (sgi_enabled ? "1" : "0");
  auto it = model_cache_.find(key);
  if (it == model_cache_.end()) it = model_cache_.emplace(key, train_model(sorted, seed, sgi_enabled)).first;
  return it->second;
}

ResultTable::Row Harness::evaluate_row(RestorationNet& model, const std::string& label,
                                       const std::vector<DegradationType>& tasks, const std::string& cell_dir) {
  ResultTable::Row row{label, {}};
  for (size_t c = 0; c < columns_.size(); ++c) {
    if (!contains(tasks, columns_[c].task)) {
      row.cells.push_back(std::nullopt);
      continue;
    }
    const auto pairs = column_pairs(c);
    row.cells.push_back(evaluate(model, *guidance_, pairs, columns_[c].label));
    if (!cell_dir.empty() && plan_.images_per_cell > 0) {
      const auto dir = plan_.output_dir / cell_dir / columns_[c].label;
      std::filesystem::create_directories(dir);
      const size_t n = std::min<size_t>(pairs.size(), static_cast<size_t>(plan_.images_per_cell));
      for (size_t i = 0; i < n; ++i) {
        write_image(dir / (std::to_string(i) + "_input.png"), pairs[i].degraded);
        write_image(dir / (std::to_string(i) + "_restored.png"),
                    restore(model, *guidance_, pairs[i].degraded, pairs[i].instruction.text));
      }
    }
  }
  return row;
}

ResultTable::Row Harness::input_row() {
  ResultTable::Row row{"Degraded input", {}};
  for (size_t c = 0; c < columns_.size(); ++c) {
    const auto pairs = column_pairs(c);
    row.cells.push_back(evaluate_inputs(pairs, columns_[c].label));
  }
  return row;
}

ResultTable Harness::empty_table(const std::string& title) const {
  ResultTable table{title, {}, {}};
  for (const auto& c : columns_) table.columns.push_back(c.label);
  return table;
}

Report Harness::make_report(const std::string& experiment) const {
  Report r;
  r.experiment = experiment;
  r.plan_name = plan_.name;
  r.config_hash = plan_.config_hash();
  r.seeds = plan_.seeds;
  r.details["preset"] = plan_.preset;
  r.details["steps"] = plan_.train.steps;
  return r;
}

namespace {

ResultTable::Row mean_row(const std::string& label, const std::vector<ResultTable::Row>& rows) {
  ResultTable::Row out{label, {}};
  for (size_t c = 0; c < rows.front().cells.size(); ++c) {
    double p = 0.0, s = 0.0;
    int n = 0, images = 0;
    for (const auto& r : rows) {
      if (!r.cells[c]) continue;
      p += r.cells[c]->psnr;
      s += r.cells[c]->ssim;
      images += r.cells[c]->n_images;
      ++n;
    }
    if (n == 0) {
      out.cells.push_back(std::nullopt);
    } else {
      out.cells.push_back(EvalRecord{rows.front().cells[c]->task, "", p / n, s / n, images});
    }
  }
  return out;
}

}  // namespace

Report Harness::run_all_in_one() {
  auto report = make_report("all_in_one");
  auto table = empty_table("All-in-one restoration (" + task_list(plan_.tasks) + ")");
  table.rows.push_back(input_row());
  std::vector<ResultTable::Row> seed_rows;
  for (auto seed : plan_.seeds) {
    auto model = model_for(plan_.tasks, seed, true);
    seed_rows.push_back(evaluate_row(model, "seed " + std::to_string(seed), plan_.tasks,
                                     "all_in_one/seed" + std::to_string(seed)));
    table.rows.push_back(seed_rows.back());
  }
  if (seed_rows.size() > 1) table.rows.push_back(mean_row("Mean", seed_rows));
  report.tables.push_back(std::move(table));
  return report;
}

Report Harness::run_single_task() {
  auto report = make_report("single_task");
  auto table = empty_table("One-by-one restoration");
  table.rows.push_back(input_row());
  for (auto task : plan_.tasks) {
    std::vector<ResultTable::Row> rows;
    for (auto seed : plan_.seeds) {
      auto model = model_for({task}, seed, true);
      rows.push_back(evaluate_row(model, std::string(to_string(task)) + " model, seed " + std::to_string(seed), {task},
                                  "single_task/" + std::string(to_string(task)) + "_seed" + std::to_string(seed)));
      table.rows.push_back(rows.back());
    }
    if (rows.size() > 1) table.rows.push_back(mean_row(std::string(to_string(task)) + " model, mean", rows));
  }
  report.tables.push_back(std::move(table));
  return report;
}

Report Harness::run_combo_ablation() {
  auto report = make_report("combo_ablation");
  auto table = empty_table("Degradation combination ablation");
  for (const auto& subset : task_subsets(plan_.tasks)) {
    std::vector<ResultTable::Row> rows;
    for (auto seed : plan_.seeds) {
      auto model = model_for(subset, seed, true);
      rows.push_back(evaluate_row(model, task_list(subset), subset));
    }
    table.rows.push_back(rows.size() > 1 ? mean_row(task_list(subset), rows) : rows.front());
  }
  report.tables.push_back(std::move(table));
  return report;
}

Report Harness::run_sgi_ablation() {
  auto report = make_report("sgi_ablation");
  auto table = empty_table("Semantic guidance ablation");
  std::vector<ResultTable::Row> on_rows, off_rows;
  for (auto seed : plan_.seeds) {
    auto on = model_for(plan_.tasks, seed, true);
    auto off = model_for(plan_.tasks, seed, false);
    on_rows.push_back(evaluate_row(on, "SGI on", plan_.tasks));
    off_rows.push_back(evaluate_row(off, "SGI off", plan_.tasks));
  }
  auto on = on_rows.size() > 1 ? mean_row("SGI on", on_rows) : on_rows.front();
  auto off = off_rows.size() > 1 ? mean_row("SGI off", off_rows) : off_rows.front();
  ResultTable::Row delta{"Delta (on - off)", {}};
  nlohmann::json deltas = nlohmann::json::object();
  for (size_t c = 0; c < on.cells.size(); ++c) {
    delta.cells.push_back(EvalRecord{columns_[c].label, "", on.cells[c]->psnr - off.cells[c]->psnr,
                                     on.cells[c]->ssim - off.cells[c]->ssim, on.cells[c]->n_images});
    deltas[columns_[c].label] = delta.cells.back()->psnr;
  }
  report.details["psnr_delta"] = deltas;
  report.details["average_psnr_delta"] =
      ResultTable::average(on)->psnr - ResultTable::average(off)->psnr;
  table.rows = {on, off, delta};
  report.tables.push_back(std::move(table));
  return report;
}

Report Harness::run_confirmatory() {
  auto report = make_report("confirmatory");
  auto model = model_for(plan_.tasks, plan_.seeds.front(), true);
  const auto& corpus = guidance_->corpus();
  Rng rng(plan_.data_seed + 2);
  std::vector<Instruction> prompts;
  for (auto t : kAllDegradations) prompts.push_back(corpus.sample(t, Split::heldout, rng));

  const auto root = plan_.output_dir / "confirmatory";
  nlohmann::json single = nlohmann::json::array();
  for (size_t c = 0; c < columns_.size(); ++c) {
    const auto pairs = column_pairs(c);
    const auto rows = confirmatory_single(model, *guidance_, pairs.front(), prompts);
    nlohmann::json entry{{"column", columns_[c].label}, {"rows", nlohmann::json::array()}};
    const auto dir = root / ("single_" + columns_[c].label);
    std::filesystem::create_directories(dir);
    write_image(dir / "input.png", pairs.front().degraded);
    for (const auto& row : rows) {
      entry["rows"].push_back({{"prompt", row.prompt},
                               {"category", std::string(to_string(row.prompt_category))},
                               {"distance_to_input", row.distance_to_input},
                               {"psnr_to_clean", row.psnr_to_clean}});
      write_image(dir / (std::string(to_string(row.prompt_category)) + ".png"), row.restored);
    }
    entry["matched_prompt_changes_most"] = rows.front().prompt_category == columns_[c].task;
    single.push_back(entry);
  }
  report.details["single"] = single;

  if (plan_.tasks.size() >= 2) {
    auto trials = selectivity_trials(model, *guidance_, eval_images_, plan_.tasks, plan_.selectivity_trials, rng);
    const auto wins = std::count_if(trials.begin(), trials.end(), [](const auto& t) { return t.success(); });
    nlohmann::json trial_json = nlohmann::json::array();
    for (const auto& t : trials) {
      trial_json.push_back({{"prompted", std::string(to_string(t.prompted))},
                            {"other", std::string(to_string(t.other))},
                            {"matched_psnr", t.matched_psnr},
                            {"mismatched_psnr", t.mismatched_psnr}});
    }
    report.details["selectivity"] = {{"trials", trial_json},
                                     {"success_rate", static_cast<double>(wins) / static_cast<double>(trials.size())}};

    std::vector<SeededSpec> specs;
    for (auto& s : physical_order({sample_spec(plan_.tasks[0], rng), sample_spec(plan_.tasks[1], rng)})) {
      specs.push_back({s, rng()});
    }
    const auto& clean = eval_images_.front();
    const auto rows = confirmatory_multi(model, *guidance_, clean, specs, prompts);
    const auto dir = root / "multi";
    std::filesystem::create_directories(dir);
    write_image(dir / "input.png", compose_seeded(clean, specs));
    nlohmann::json multi = nlohmann::json::array();
    for (const auto& row : rows) {
      const std::string tag(to_string(row.prompt_category));
      write_image(dir / (tag + "_restored.png"), row.restored);
      for (size_t l = 0; l < row.attention_maps.size(); ++l) {
        write_image(dir / (tag + "_attention_level" + std::to_string(l + 1) + ".png"),
                    map_to_image(row.attention_maps[l]));
      }
      nlohmann::json targets = nlohmann::json::object();
      for (const auto& [kind, value] : row.psnr_to_target) targets[std::string(to_string(kind))] = value;
      multi.push_back({{"prompt", row.prompt}, {"category", tag}, {"psnr_to_target", targets}});
    }
    report.details["multi"] = multi;
  }
  return report;
}

Report Harness::run_stability() {
  auto report = make_report("stability");
  auto model = model_for(plan_.tasks, plan_.seeds.front(), true);
  Rng rng(plan_.data_seed + 3);
  std::vector<std::vector<std::string>> text_rows;
  nlohmann::json per_column = nlohmann::json::object();
  for (size_t c = 0; c < columns_.size(); ++c) {
    const auto s = stability_repeat(model, *guidance_, column_pairs(c), plan_.stability_repeats, rng);
    per_column[columns_[c].label] = s.to_json();
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%.3f|%.4f|%.4f|%.5f", s.psnr_mean, s.psnr_std, s.ssim_mean, s.ssim_std);
    auto parts = split_list(buf, '|');
    parts.insert(parts.begin(), columns_[c].label);
    text_rows.push_back(parts);
  }
  report.details["columns"] = per_column;
  report.details["table"] = render_table({"", "PSNR mean", "PSNR std", "SSIM mean", "SSIM std"}, text_rows);
  return report;
}

void Harness::write_report(const Report& report) const {
  std::filesystem::create_directories(plan_.output_dir);
  std::ofstream(plan_.output_dir / (report.experiment + ".json")) << report.to_json().dump(2) << "\n";
  auto text = report.render();
  if (report.details.contains("table")) text += report.details["table"].get<std::string>();
  std::ofstream(plan_.output_dir / (report.experiment + ".txt")) << text;
}

std::vector<Report> Harness::run() {
  std::vector<Report> reports;
  for (const auto& name : plan_.experiments) {
    Report r;
    if (name == "all_in_one") r = run_all_in_one();
    else if (name == "single_task") r = run_single_task();
    else if (name == "combo_ablation") r = run_combo_ablation();
    else if (name == "sgi_ablation") r = run_sgi_ablation();
    else if (name == "confirmatory") r = run_confirmatory();
    else r = run_stability();
    write_report(r);
    if (log_) *log_ << r.render() << std::flush;
    reports.push_back(std::move(r));
  }
  return reports;
}

}  // namespace promptrestore
