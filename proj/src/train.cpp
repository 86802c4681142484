#include "promptrestore/train.hpp"

#include <cmath>
#include <numbers>
#include <ostream>

namespace promptrestore {

namespace {

std::string to_string(LossKind kind) { return kind == LossKind::l1 ? "l1" : "l2"; }
std::string to_string(Schedule s) { return s == Schedule::constant ? "constant" : "cosine"; }

LossKind parse_loss(const std::string& name) {
  if (name == "l1") return LossKind::l1;
  if (name == "l2") return LossKind::l2;
  throw InvalidArgument("unknown loss '" + name + "' (expected l1 or l2)");
}

Schedule parse_schedule(const std::string& name) {
  if (name == "constant") return Schedule::constant;
  if (name == "cosine") return Schedule::cosine;
  throw InvalidArgument("unknown schedule '" + name + "' (expected constant or cosine)");
}

NamedTensors with_prefix(const std::string& prefix, const NamedTensors& tensors) {
  NamedTensors out;
  out.reserve(tensors.size());
  for (const auto& [name, t] : tensors) out.emplace_back(prefix + name, t);
  return out;
}

NamedTensors optimized_parameters(RestorationNet& model, GuidanceProvider& guidance) {
  auto params = with_prefix("backbone.", unique_named_parameters(*model));
  if (guidance.trainable()) {
    for (auto& item : with_prefix("textenc.", unique_named_parameters(*guidance.encoder()))) {
      params.push_back(std::move(item));
    }
  }
  return params;
}

}  // namespace

double TrainConfig::lr_at(int64_t completed_steps) const {
  if (schedule == Schedule::constant || steps <= 0) return lr;
  const double progress = std::min(1.0, static_cast<double>(completed_steps) / static_cast<double>(steps));
  return lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw InvalidArgument("learning rate must be positive");
  if (steps < 1) throw InvalidArgument("steps must be positive");
  if (batch_size < 1) throw InvalidArgument("batch size must be >= 1");
  if (patch < 1) throw InvalidArgument("patch size must be >= 1");
  if (tasks.empty()) throw InvalidArgument("task set must not be empty");
  if (checkpoint_every < 0 || eval_every < 0 || log_every < 0) throw InvalidArgument("cadences must be >= 0");
}

nlohmann::json TrainConfig::to_json() const {
  std::vector<std::string> task_names;
  for (auto t : tasks) task_names.emplace_back(promptrestore::to_string(t));
  return {{"lr", lr},
          {"betas", {beta1, beta2}},
          {"weight_decay", weight_decay},
          {"batch_size", batch_size},
          {"patch", patch},
          {"steps", steps},
          {"seed", seed},
          {"loss", to_string(loss)},
          {"schedule", to_string(schedule)},
          {"tasks", task_names},
          {"finetune_text_encoder", finetune_text_encoder},
          {"checkpoint_every", checkpoint_every},
          {"eval_every", eval_every},
          {"log_every", log_every}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.lr = j.value("lr", c.lr);
  if (j.contains("betas")) {
    const auto betas = j.at("betas").get<std::vector<double>>();
    if (betas.size() != 2) throw InvalidArgument("betas must have two entries");
    c.beta1 = betas[0];
    c.beta2 = betas[1];
  }
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.patch = j.value("patch", c.patch);
  c.steps = j.value("steps", c.steps);
  c.seed = j.value("seed", c.seed);
  c.loss = parse_loss(j.value("loss", std::string("l1")));
  c.schedule = parse_schedule(j.value("schedule", std::string("constant")));
  if (j.contains("tasks")) {
    c.tasks.clear();
    for (const auto& name : j.at("tasks")) c.tasks.push_back(parse_degradation(name.get<std::string>()));
  }
  c.finetune_text_encoder = j.value("finetune_text_encoder", c.finetune_text_encoder);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.log_every = j.value("log_every", c.log_every);
  return c;
}

torch::Tensor restoration_loss(const torch::Tensor& restored, const torch::Tensor& target, LossKind kind) {
  if (!restored.sizes().equals(target.sizes())) throw InvalidArgument("loss operands differ in shape");
  const auto diff = restored - target;
  return kind == LossKind::l1 ? diff.abs().mean() : diff.square().mean();
}

double restoration_loss(std::span<const Image> restored, std::span<const Image> target, LossKind kind) {
  if (restored.size() != target.size()) throw InvalidArgument("loss batches differ in size");
  double sum = 0.0;
  size_t count = 0;
  for (size_t i = 0; i < restored.size(); ++i) {
    require_same_shape(restored[i], target[i], "loss operands");
    const auto a = restored[i].values();
    const auto b = target[i].values();
    for (size_t k = 0; k < a.size(); ++k) {
      const double d = static_cast<double>(a[k]) - b[k];
      sum += kind == LossKind::l1 ? std::abs(d) : d * d;
    }
    count += a.size();
  }
  if (count == 0) throw InvalidArgument("loss over an empty batch");
  return sum / static_cast<double>(count);
}

TrainState make_train_state(const BackboneConfig& backbone, const TrainConfig& config, GuidanceProvider& guidance) {
  backbone.validate();
  if (backbone.d_text != guidance.d_model()) {
    throw InvalidArgument("backbone d_text " + std::to_string(backbone.d_text) + " does not match encoder width " +
                          std::to_string(guidance.d_model()));
  }
  torch::manual_seed(config.seed);
  TrainState state{backbone, config, RestorationNet(backbone), nullptr, 0, Rng(config.seed)};
  state.model->train();
  state.optimizer = std::make_unique<AdamW>(
      optimized_parameters(state.model, guidance),
      AdamW::Options{config.lr, config.beta1, config.beta2, 1e-8, config.weight_decay});
  return state;
}

StepResult train_step(TrainState& state, GuidanceProvider& guidance, std::span<const ImagePair> batch) {
  if (batch.empty()) throw InvalidArgument("train_step needs a non-empty batch");
  std::vector<Image> degraded, clean;
  std::vector<std::string> texts;
  for (const auto& pair : batch) {
    degraded.push_back(pair.degraded);
    clean.push_back(pair.clean);
    texts.push_back(pair.instruction.text);
  }
  state.model->train();
  const double lr = state.config.lr_at(state.step);
  const auto z = guidance.batch(texts);
  const auto restored = state.model->forward(to_tensor(degraded), z);
  const auto loss = restoration_loss(restored, to_tensor(clean), state.config.loss);
  const double value = loss.item<double>();
  if (!std::isfinite(value)) throw TrainingFailure(state.step + 1, "non-finite restoration loss");
  state.optimizer->zero_grad();
  loss.backward();
  state.optimizer->step(lr);
  ++state.step;
  return {value, lr};
}

SyntheticPairStream::SyntheticPairStream(std::vector<Image> cleans, TaskMix mix, InstructionCorpus corpus, int patch,
                                         int batch_size, DegradationRanges ranges)
    : cleans_(std::move(cleans)),
      mix_(mix),
      corpus_(std::move(corpus)),
      patch_(patch),
      batch_size_(batch_size),
      ranges_(std::move(ranges)) {
  if (cleans_.empty()) throw InvalidArgument("pair stream needs clean images");
  if (batch_size_ < 1) throw InvalidArgument("batch size must be >= 1");
}

std::vector<ImagePair> SyntheticPairStream::next(Rng& rng) {
  std::vector<Image> picked;
  picked.reserve(batch_size_);
  for (int i = 0; i < batch_size_; ++i) picked.push_back(cleans_[uniform_index(rng, cleans_.size())]);
  return make_batch(picked, mix_, corpus_, patch_, rng, ranges_, Split::train);
}

nlohmann::json LogEntry::to_json() const {
  nlohmann::json j{{"step", step}, {"loss", loss}, {"lr", lr}};
  if (psnr_eval) j["psnr_eval"] = *psnr_eval;
  return j;
}

std::filesystem::path periodic_checkpoint_path(const std::filesystem::path& prefix, int64_t step) {
  return std::filesystem::path(prefix.string() + ".step" + std::to_string(step));
}

std::vector<LogEntry> fit(TrainState& state, GuidanceProvider& guidance, PairStream& stream, const FitHooks& hooks) {
  state.config.validate();
  const auto& cfg = state.config;
  std::vector<LogEntry> log;
  while (state.step < cfg.steps) {
    const auto batch = stream.next(state.rng);
    const auto result = train_step(state, guidance, batch);
    LogEntry entry{state.step, result.loss, result.lr, std::nullopt};
    if (hooks.evaluate && cfg.eval_every > 0 && state.step % cfg.eval_every == 0) {
      entry.psnr_eval = hooks.evaluate(state);
    }
    const bool last = state.step == cfg.steps;
    if (entry.psnr_eval || (cfg.log_every > 0 && (state.step % cfg.log_every == 0 || last))) {
      if (hooks.log_stream) *hooks.log_stream << entry.to_json().dump() << "\n" << std::flush;
      log.push_back(entry);
    }
    if (cfg.checkpoint_every > 0 && !hooks.checkpoint_prefix.empty() && state.step % cfg.checkpoint_every == 0) {
      save_train_state(periodic_checkpoint_path(hooks.checkpoint_prefix, state.step), state, guidance);
    }
  }
  return log;
}

void save_train_state(const std::filesystem::path& path, const TrainState& state, GuidanceProvider& guidance) {
  CheckpointManifest manifest;
  manifest.kind = "backbone";
  manifest.config = {{"backbone", state.backbone_config.to_json()}, {"train", state.config.to_json()}};
  manifest.step = state.step;
  manifest.rng_state = rng_state(state.rng);
  manifest.extra = {{"optimizer_steps", state.optimizer->step_count()},
                    {"text_encoder_trained", guidance.trainable()}};
  auto tensors = with_prefix("model.", unique_named_parameters(*state.model));
  if (guidance.trainable()) {
    for (auto& item : with_prefix("textenc.", unique_named_parameters(*guidance.encoder()))) {
      tensors.push_back(std::move(item));
    }
  }
  for (auto& item : with_prefix("optim.", state.optimizer->state_tensors())) tensors.push_back(std::move(item));
  write_checkpoint(path, std::move(manifest), tensors);
}

TrainState load_train_state(const std::filesystem::path& path, GuidanceProvider& guidance) {
  const auto ckpt = read_checkpoint(path);
  if (ckpt.manifest.kind != "backbone") {
    throw CheckpointError(CheckpointErrorKind::malformed, "expected a backbone checkpoint, got " + ckpt.manifest.kind);
  }
  const auto backbone = BackboneConfig::from_json(ckpt.manifest.config.at("backbone"));
  const auto config = TrainConfig::from_json(ckpt.manifest.config.at("train"));
  auto state = make_train_state(backbone, config, guidance);
  assign_tensors(ckpt, unique_named_parameters(*state.model), "model.");
  if (guidance.trainable()) assign_tensors(ckpt, unique_named_parameters(*guidance.encoder()), "textenc.");
  state.optimizer->load_state(tensors_with_prefix(ckpt, "optim."), ckpt.manifest.extra.value("optimizer_steps", 0));
  state.step = ckpt.manifest.step;
  restore_rng_state(state.rng, ckpt.manifest.rng_state);
  return state;
}

void save_backbone(const std::filesystem::path& path, RestorationNet& model) {
  CheckpointManifest manifest;
  manifest.kind = "backbone";
  manifest.config = {{"backbone", model->config().to_json()}};
  write_checkpoint(path, std::move(manifest), with_prefix("model.", unique_named_parameters(*model)));
}

RestorationNet load_backbone(const std::filesystem::path& path) {
  const auto ckpt = read_checkpoint(path);
  if (ckpt.manifest.kind != "backbone") {
    throw CheckpointError(CheckpointErrorKind::malformed, "expected a backbone checkpoint, got " + ckpt.manifest.kind);
  }
  RestorationNet model(BackboneConfig::from_json(ckpt.manifest.config.at("backbone")));
  assign_tensors(ckpt, unique_named_parameters(*model), "model.");
  model->eval();
  return model;
}

void save_text_encoder(const std::filesystem::path& path, TextEncoder& encoder, const InstructionCorpus& corpus,
                       const nlohmann::json& finetune_info) {
  CheckpointManifest manifest;
  manifest.kind = "textenc";
  manifest.config = encoder->config().to_json();
  manifest.extra = {{"corpus", corpus.serialize()},
                    {"vocabulary", corpus.vocabulary()},
                    {"centroids", compute_centroids(encoder, corpus, Split::train).to_json()},
                    {"finetune", finetune_info}};
  write_checkpoint(path, std::move(manifest), with_prefix("model.", unique_named_parameters(*encoder)));
}

TextEncoderBundle load_text_encoder(const std::filesystem::path& path) {
  const auto ckpt = read_checkpoint(path);
  if (ckpt.manifest.kind != "textenc") {
    throw CheckpointError(CheckpointErrorKind::malformed, "expected a textenc checkpoint, got " + ckpt.manifest.kind);
  }
  const auto& extra = ckpt.manifest.extra;
  InstructionCorpus corpus(InstructionCorpus::parse(extra.at("corpus").get<std::string>()).instructions(),
                           extra.at("vocabulary").get<std::vector<std::string>>());
  TextEncoder encoder(TextEncoderConfig::from_json(ckpt.manifest.config));
  assign_tensors(ckpt, unique_named_parameters(*encoder), "model.");
  encoder->eval();
  return {encoder, std::move(corpus), CategoryCentroids::from_json(extra.at("centroids"))};
}

}  // namespace promptrestore
