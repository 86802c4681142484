#include "test_support.hpp"

#include "promptrestore/harness.hpp"

using namespace promptrestore;
namespace fs = std::filesystem;

namespace {

TextEncoderBundle small_bundle(const InstructionCorpus& corpus) {
  torch::manual_seed(21);
  auto cfg = TextEncoderConfig::tiny(corpus.vocab_size());
  cfg.n_layers = 1;
  TextEncoder enc(cfg);
  enc->eval();
  return {enc, corpus, compute_centroids(enc, corpus, Split::train)};
}

ExperimentPlan small_plan(const fs::path& out) {
  ExperimentPlan plan;
  plan.name = "smoke";
  plan.train.steps = 2;
  plan.train.batch_size = 2;
  plan.train.patch = 16;
  plan.train_images = 2;
  plan.eval_images = 2;
  plan.image_size = 16;
  plan.selectivity_trials = 3;
  plan.stability_repeats = 2;
  plan.images_per_cell = 1;
  plan.output_dir = out;
  return plan;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

EvalRecord record(double p, double s) { return EvalRecord{"t", "d", p, s, 1}; }

}  // namespace

TEST_CASE("three tasks give five columns plus the average") {
  const auto cols = default_columns({DegradationType::noise, DegradationType::rain, DegradationType::haze});
  REQUIRE(cols.size() == 5);
  CHECK(cols[0].sigma_255 == 15.0);
  CHECK(cols[1].sigma_255 == 25.0);
  CHECK(cols[2].sigma_255 == 50.0);
  CHECK(cols[3].task == DegradationType::rain);
  CHECK(cols[4].task == DegradationType::haze);
  CHECK(default_columns({DegradationType::rain}).size() == 1);

  ResultTable table{"t", {"a", "b", "c"}, {{"row", {record(30, 0.9), std::nullopt, record(20, 0.7)}}}};
  const auto text = table.render();
  CHECK(text.find("Average") != std::string::npos);
  CHECK(text.find(" - ") != std::string::npos);
  const auto avg = ResultTable::average(table.rows[0]);
  REQUIRE(avg.has_value());
  CHECK(avg->psnr == doctest::Approx(25.0));
  CHECK(avg->ssim == doctest::Approx(0.8));
  CHECK_FALSE(ResultTable::average({"empty", {std::nullopt}}).has_value());
  CHECK(table.to_json().at("rows").at(0).at("cells").at(1).is_null());
}

TEST_CASE("task subsets enumerate every non-empty combination") {
  const auto subsets = task_subsets({DegradationType::noise, DegradationType::rain, DegradationType::haze});
  REQUIRE(subsets.size() == 7);
  CHECK(subsets[0].size() == 1);
  CHECK(subsets[3].size() == 2);
  CHECK(subsets[6].size() == 3);
}

TEST_CASE("plans validate and round trip") {
  ExperimentPlan plan;
  plan.train.steps = 10;
  CHECK_NOTHROW(plan.validate());
  CHECK(ExperimentPlan::from_json(plan.to_json()).to_json() == plan.to_json());
  CHECK(ExperimentPlan::from_json(plan.to_json()).config_hash() == plan.config_hash());
  auto other = plan;
  other.data_seed = 9;
  CHECK(other.config_hash() != plan.config_hash());
  CHECK(plan.config_hash().size() == 16);

  plan.repeats = 2;
  CHECK_THROWS_AS(plan.validate(), InvalidArgument);
  plan.repeats = 1;
  plan.tasks.clear();
  CHECK_THROWS_AS(plan.validate(), InvalidArgument);
  plan.tasks = {DegradationType::noise};
  plan.experiments = {"unknown"};
  CHECK_THROWS_AS(plan.validate(), InvalidArgument);
}

TEST_CASE("stability of a single repeat has zero spread") {
  TempDir dir("promptrestore_harness_stab");
  const auto corpus = InstructionCorpus::generate(0, 10);
  Harness h(small_plan(dir.path), small_bundle(corpus));
  auto model = h.train_model({DegradationType::noise}, 0, true);
  Rng rng(1);
  const auto one = stability_repeat(model, h.guidance(), h.column_pairs(0), 1, rng);
  CHECK(one.psnr.size() == 1);
  CHECK(one.psnr_std == 0.0);
  const auto many = stability_repeat(model, h.guidance(), h.column_pairs(0), 15, rng);
  CHECK(many.psnr.size() == 15);
}

TEST_CASE("a single-sentence cell removes all prompt variance") {
  TempDir dir("promptrestore_harness_single");
  std::vector<Instruction> list;
  for (auto t : kAllDegradations) {
    for (int i = 0; i < 3; ++i) list.push_back({"remove " + std::string(to_string(t)) + " " + std::to_string(i), t, Split::train});
    list.push_back({"remove the " + std::string(to_string(t)), t, Split::heldout});
  }
  const InstructionCorpus corpus(list);
  Harness h(small_plan(dir.path), small_bundle(corpus));
  auto model = h.train_model({DegradationType::noise}, 0, true);
  Rng rng(2);
  const auto report = stability_repeat(model, h.guidance(), h.column_pairs(0), 5, rng);
  CHECK(report.psnr_std == 0.0);
  CHECK(report.ssim_std == 0.0);
}

TEST_CASE("partial targets re-render the composition without one degradation") {
  Image clean(16, 16, 0.4f);
  const std::vector<SeededSpec> specs = {{DegradationSpec::rain({}), 3}, {DegradationSpec::noise(0.1), 4}};
  const auto no_rain = partial_target(clean, specs, DegradationType::rain);
  CHECK(no_rain == compose_seeded(clean, std::vector<SeededSpec>{specs[1]}));
  CHECK(partial_target(clean, specs, DegradationType::haze) == compose_seeded(clean, specs));
}

TEST_CASE("confirmatory analyses run on an untrained model") {
  TempDir dir("promptrestore_harness_conf");
  const auto corpus = InstructionCorpus::generate(0, 10);
  Harness h(small_plan(dir.path), small_bundle(corpus));
  RestorationNet model(BackboneConfig::tiny());
  model->eval();
  std::vector<Instruction> prompts;
  Rng rng(3);
  for (auto t : kAllDegradations) prompts.push_back(corpus.sample(t, Split::heldout, rng));

  const auto pairs = h.column_pairs(3);
  const auto single = confirmatory_single(model, h.guidance(), pairs.front(), prompts);
  REQUIRE(single.size() == 3);
  for (size_t i = 0; i < single.size(); ++i) {
    CHECK(single[i].distance_to_input >= 0.0);
    if (i) CHECK(single[i - 1].distance_to_input >= single[i].distance_to_input);
  }

  const std::vector<SeededSpec> specs = {{DegradationSpec::haze({}), 5}, {DegradationSpec::noise(0.1), 6}};
  const auto multi = confirmatory_multi(model, h.guidance(), h.eval_images().front(), specs, prompts);
  REQUIRE(multi.size() == 3);
  CHECK(multi[0].psnr_to_target.size() == 2);
  CHECK(multi[0].attention_maps.size() == 4);

  const auto trials = selectivity_trials(model, h.guidance(), h.eval_images(),
                                         {DegradationType::noise, DegradationType::rain}, 4, rng);
  CHECK(trials.size() == 4);
  for (const auto& t : trials) CHECK(t.prompted != t.other);
  CHECK_THROWS_AS(selectivity_trials(model, h.guidance(), h.eval_images(), {DegradationType::noise}, 1, rng),
                  InvalidArgument);
}

TEST_CASE("evaluation pairs are deterministic per column") {
  TempDir dir("promptrestore_harness_pairs");
  const auto corpus = InstructionCorpus::generate(0, 10);
  Harness h(small_plan(dir.path), small_bundle(corpus));
  const auto a = h.column_pairs(4), b = h.column_pairs(4);
  REQUIRE(a.size() == 2);
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].degraded == b[i].degraded);
    CHECK(a[i].instruction.text == b[i].instruction.text);
    CHECK(a[i].instruction.split == Split::heldout);
    CHECK(a[i].instruction.category == DegradationType::haze);
  }
  RestorationNet model(BackboneConfig::tiny());
  model->eval();
  const auto row = h.evaluate_row(model, "noise only", {DegradationType::noise});
  CHECK(row.cells[0].has_value());
  CHECK_FALSE(row.cells[3].has_value());
  CHECK_FALSE(row.cells[4].has_value());
}

TEST_CASE("evaluating identical pairs gives infinite PSNR and unit SSIM") {
  Image clean(16, 16, 0.3f);
  const std::vector<ImagePair> pairs = {{clean, clean, {}, {"remove", DegradationType::noise, Split::train}}};
  const auto rec = evaluate_inputs(pairs, "noise");
  CHECK(rec.psnr == kInfinitePsnr);
  CHECK(rec.ssim == 1.0);
  CHECK(rec.n_images == 1);
}

TEST_CASE("a full plan writes every report") {
  TempDir dir("promptrestore_harness_run");
  const auto corpus = InstructionCorpus::generate(0, 10);
  auto plan = small_plan(dir.path);
  plan.tasks = {DegradationType::noise, DegradationType::rain};
  plan.experiments = {"all_in_one", "single_task", "combo_ablation", "sgi_ablation", "confirmatory", "stability"};
  Harness h(plan, small_bundle(corpus));
  const auto reports = h.run();
  REQUIRE(reports.size() == 6);
  for (const auto& name : plan.experiments) {
    CHECK(fs::exists(dir.path / (name + ".json")));
    CHECK(fs::exists(dir.path / (name + ".txt")));
  }
  const auto& combo = reports[2].tables.at(0);
  REQUIRE(combo.rows.size() == 3);
  CHECK_FALSE(combo.rows[0].cells[3].has_value());
  CHECK(reports[3].details.contains("average_psnr_delta"));
  CHECK(reports[4].details.contains("selectivity"));
  CHECK(reports[0].config_hash == plan.config_hash());
  CHECK(fs::exists(dir.path / "confirmatory" / "multi" / "input.png"));
}
