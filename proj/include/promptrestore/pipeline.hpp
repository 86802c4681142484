#pragma once

#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <torch/torch.h>

#include "promptrestore/backbone.hpp"
#include "promptrestore/corpus.hpp"
#include "promptrestore/degrade.hpp"
#include "promptrestore/image.hpp"
#include "promptrestore/metrics.hpp"
#include "promptrestore/textenc.hpp"

namespace promptrestore {

/// [B, 3, H, W] float tensor; all images must share one shape.
torch::Tensor to_tensor(std::span<const Image> images);
torch::Tensor to_tensor(const Image& image);
/// Accepts [3, H, W] or [1, 3, H, W].
Image to_image(const torch::Tensor& tensor);

/// Instruction text -> guidance vector Z through a text encoder. A frozen
/// provider memoizes vectors per sentence; a trainable one recomputes them
/// with gradients so the encoder can be updated together with the backbone.
class GuidanceProvider {
 public:
  GuidanceProvider(TextEncoder encoder, InstructionCorpus corpus, bool trainable = false);

  /// [B, d_model]
  torch::Tensor batch(const std::vector<std::string>& texts);
  GuidanceVector single(const std::string& text);

  TextEncoder& encoder() { return encoder_; }
  const InstructionCorpus& corpus() const { return corpus_; }
  bool trainable() const { return trainable_; }
  int d_model() const { return encoder_->config().d_model; }

 private:
  torch::Tensor frozen_vector(const std::string& text);

  TextEncoder encoder_;
  InstructionCorpus corpus_;
  bool trainable_;
  std::unordered_map<std::string, torch::Tensor> cache_;
};

/// Eval-mode restoration of one image, clipped to [0, 1].
Image restore(RestorationNet& model, GuidanceProvider& guidance, const Image& degraded, const std::string& prompt);

/// Restores every pair with its own instruction and averages PSNR/SSIM against the clean image.
EvalRecord evaluate(RestorationNet& model, GuidanceProvider& guidance, std::span<const ImagePair> pairs,
                    const std::string& task, const std::string& dataset = "synthetic");

/// Mean PSNR/SSIM of the degraded inputs themselves.
EvalRecord evaluate_inputs(std::span<const ImagePair> pairs, const std::string& task,
                           const std::string& dataset = "synthetic");

/// Fixed evaluation pairs: each clean image (full size, no flips) degraded by
/// a spec sampled for `task`, with an instruction of that category from `split`.
std::vector<ImagePair> make_eval_set(std::span<const Image> cleans, DegradationType task,
                                     const InstructionCorpus& corpus, Rng& rng, Split split = Split::heldout,
                                     const DegradationRanges& ranges = {});

}  // namespace promptrestore
