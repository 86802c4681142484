#include "promptrestore/pipeline.hpp"

#include <algorithm>
#include <cstring>

namespace promptrestore {

torch::Tensor to_tensor(std::span<const Image> images) {
  if (images.empty()) throw InvalidArgument("cannot build a tensor from zero images");
  const int h = images.front().height();
  const int w = images.front().width();
  auto out = torch::empty({static_cast<int64_t>(images.size()), Image::kChannels, h, w}, torch::kFloat32);
  float* dst = out.data_ptr<float>();
  for (const auto& image : images) {
    require_same_shape(images.front(), image, "batch images");
    std::memcpy(dst, image.values().data(), image.size() * sizeof(float));
    dst += image.size();
  }
  return out;
}

torch::Tensor to_tensor(const Image& image) { return to_tensor(std::span<const Image>(&image, 1)); }

Image to_image(const torch::Tensor& tensor) {
  auto t = tensor.detach().to(torch::kCPU, torch::kFloat32);
  if (t.dim() == 4) {
    if (t.size(0) != 1) throw InvalidArgument("to_image expects a single image");
    t = t[0];
  }
  if (t.dim() != 3 || t.size(0) != Image::kChannels) throw InvalidArgument("to_image expects [3, H, W]");
  t = t.contiguous();
  Image image(static_cast<int>(t.size(1)), static_cast<int>(t.size(2)));
  std::memcpy(image.values().data(), t.data_ptr<float>(), image.size() * sizeof(float));
  return image;
}

GuidanceProvider::GuidanceProvider(TextEncoder encoder, InstructionCorpus corpus, bool trainable)
    : encoder_(std::move(encoder)), corpus_(std::move(corpus)), trainable_(trainable) {
  if (!trainable_) {
    encoder_->eval();
    for (auto& p : encoder_->parameters()) p.set_requires_grad(false);
  }
}

torch::Tensor GuidanceProvider::frozen_vector(const std::string& text) {
  auto it = cache_.find(text);
  if (it == cache_.end()) it = cache_.emplace(text, embed_text(encoder_, corpus_, text).tensor()).first;
  return it->second;
}

torch::Tensor GuidanceProvider::batch(const std::vector<std::string>& texts) {
  if (texts.empty()) throw InvalidArgument("guidance batch needs at least one text");
  std::vector<torch::Tensor> rows;
  rows.reserve(texts.size());
  for (const auto& text : texts) {
    if (trainable_) {
      const auto tokens = corpus_.tokenize(text);
      const auto encoded = encoder_->encode(tokens);
      const auto length = encoded.states.size(0);
      auto mask = torch::tensor(std::vector<int64_t>(tokens.attention_mask.begin(),
                                                     tokens.attention_mask.begin() + length));
      rows.push_back(pool_guidance(encoded.states, mask));
    } else {
      rows.push_back(frozen_vector(text));
    }
  }
  return torch::stack(rows);
}

GuidanceVector GuidanceProvider::single(const std::string& text) {
  torch::NoGradGuard no_grad;
  if (!trainable_) return GuidanceVector::from_tensor(frozen_vector(text));
  return embed_text(encoder_, corpus_, text);
}

Image restore(RestorationNet& model, GuidanceProvider& guidance, const Image& degraded, const std::string& prompt) {
  torch::NoGradGuard no_grad;
  const bool was_training = model->is_training();
  model->eval();
  const auto z = guidance.single(prompt).tensor().unsqueeze(0);
  auto out = to_image(model->forward(to_tensor(degraded), z));
  model->train(was_training);
  out.clamp();
  return out;
}

EvalRecord evaluate(RestorationNet& model, GuidanceProvider& guidance, std::span<const ImagePair> pairs,
                    const std::string& task, const std::string& dataset) {
  std::vector<double> psnrs, ssims;
  for (const auto& pair : pairs) {
    const auto restored = restore(model, guidance, pair.degraded, pair.instruction.text);
    psnrs.push_back(psnr(restored, pair.clean));
    ssims.push_back(ssim(restored, pair.clean));
  }
  return summarize(task, dataset, psnrs, ssims);
}

EvalRecord evaluate_inputs(std::span<const ImagePair> pairs, const std::string& task, const std::string& dataset) {
  std::vector<double> psnrs, ssims;
  for (const auto& pair : pairs) {
    psnrs.push_back(psnr(pair.degraded, pair.clean));
    ssims.push_back(ssim(pair.degraded, pair.clean));
  }
  return summarize(task, dataset, psnrs, ssims);
}

std::vector<ImagePair> make_eval_set(std::span<const Image> cleans, DegradationType task,
                                     const InstructionCorpus& corpus, Rng& rng, Split split,
                                     const DegradationRanges& ranges) {
  std::vector<ImagePair> out;
  out.reserve(cleans.size());
  for (const auto& clean : cleans) {
    auto spec = sample_spec(task, rng, ranges);
    auto degraded = apply(clean, spec, rng);
    out.push_back({std::move(degraded), clean, {spec}, corpus.sample(task, split, rng)});
  }
  return out;
}

}  // namespace promptrestore
