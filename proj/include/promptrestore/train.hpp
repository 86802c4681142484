#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"
#include "promptrestore/backbone.hpp"
#include "promptrestore/checkpoint.hpp"
#include "promptrestore/degrade.hpp"
#include "promptrestore/optim.hpp"
#include "promptrestore/pipeline.hpp"
#include "promptrestore/textenc.hpp"

namespace promptrestore {

enum class LossKind { l1, l2 };
enum class Schedule { constant, cosine };

struct TrainConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 1e-4;
  int batch_size = 6;
  int patch = 128;
  int64_t steps = 0;
  uint64_t seed = 0;
  LossKind loss = LossKind::l1;
  Schedule schedule = Schedule::constant;
  std::vector<DegradationType> tasks{DegradationType::noise, DegradationType::rain, DegradationType::haze};
  bool finetune_text_encoder = false;
  int64_t checkpoint_every = 0;  // 0 disables periodic checkpoints
  int64_t eval_every = 0;        // 0 disables the evaluation hook
  int64_t log_every = 1;

  TaskMix task_mix() const { return TaskMix::uniform_over(tasks); }
  /// Learning rate for the update that follows `completed_steps` updates.
  double lr_at(int64_t completed_steps) const;

  /// Positive lr and steps, batch >= 1, non-empty task set.
  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Mean absolute (l1) or squared (l2) error over all elements.
torch::Tensor restoration_loss(const torch::Tensor& restored, const torch::Tensor& target, LossKind kind);
double restoration_loss(std::span<const Image> restored, std::span<const Image> target, LossKind kind);

/// Everything a training run mutates. Move-only.
struct TrainState {
  BackboneConfig backbone_config;
  TrainConfig config;
  RestorationNet model{nullptr};
  std::unique_ptr<AdamW> optimizer;
  int64_t step = 0;
  Rng rng;
};

/// Seeds torch and the data stream from config.seed and builds model and
/// optimizer. The optimizer also owns the text encoder parameters when the
/// guidance provider is trainable.
TrainState make_train_state(const BackboneConfig& backbone, const TrainConfig& config, GuidanceProvider& guidance);

struct StepResult {
  double loss = 0.0;  // batch loss before the update
  double lr = 0.0;
};

/// One optimizer update on `batch`. Throws InvalidArgument on an empty batch
/// and TrainingFailure (with the step index) on a non-finite loss.
StepResult train_step(TrainState& state, GuidanceProvider& guidance, std::span<const ImagePair> batch);

/// Source of training batches; draws all randomness from the supplied stream.
class PairStream {
 public:
  virtual ~PairStream() = default;
  virtual std::vector<ImagePair> next(Rng& rng) = 0;
};

/// Random crops of a fixed clean set, degraded on the fly.
class SyntheticPairStream : public PairStream {
 public:
  SyntheticPairStream(std::vector<Image> cleans, TaskMix mix, InstructionCorpus corpus, int patch, int batch_size,
                      DegradationRanges ranges = {});
  std::vector<ImagePair> next(Rng& rng) override;

 private:
  std::vector<Image> cleans_;
  TaskMix mix_;
  InstructionCorpus corpus_;
  int patch_;
  int batch_size_;
  DegradationRanges ranges_;
};

struct LogEntry {
  int64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  std::optional<double> psnr_eval;

  nlohmann::json to_json() const;
};

struct FitHooks {
  /// Periodic checkpoints go to `<checkpoint_prefix>.step<N>`.
  std::filesystem::path checkpoint_prefix;
  std::function<double(TrainState&)> evaluate;
  std::ostream* log_stream = nullptr;  // JSON lines
};

/// Runs train_step until state.step reaches config.steps (so a resumed state
/// only performs the remaining updates). Returns the log of this call.
std::vector<LogEntry> fit(TrainState& state, GuidanceProvider& guidance, PairStream& stream,
                          const FitHooks& hooks = {});

std::filesystem::path periodic_checkpoint_path(const std::filesystem::path& prefix, int64_t step);

/// Backbone checkpoint with optimizer moments, step and data-stream state.
void save_train_state(const std::filesystem::path& path, const TrainState& state, GuidanceProvider& guidance);
TrainState load_train_state(const std::filesystem::path& path, GuidanceProvider& guidance);

/// Inference-only views of the same checkpoint format.
void save_backbone(const std::filesystem::path& path, RestorationNet& model);
RestorationNet load_backbone(const std::filesystem::path& path);

struct TextEncoderBundle {
  TextEncoder encoder{nullptr};
  InstructionCorpus corpus;
  CategoryCentroids centroids;
};

/// The text encoder checkpoint carries its corpus and vocabulary so it can
/// tokenize on its own, plus the train-split category centroids.
void save_text_encoder(const std::filesystem::path& path, TextEncoder& encoder, const InstructionCorpus& corpus,
                       const nlohmann::json& finetune_info = nlohmann::json::object());
TextEncoderBundle load_text_encoder(const std::filesystem::path& path);

}  // namespace promptrestore
