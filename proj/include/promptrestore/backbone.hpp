#pragma once

#include <string>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"

namespace promptrestore {

/// Architecture of the restoration network. Level i (1-based) runs at
/// base_channels * 2^(i-1) channels; the last level is the bottleneck.
struct BackboneConfig {
  int base_channels = 48;
  std::vector<int> blocks_per_level{4, 6, 6, 8};
  std::vector<int> heads_per_level{1, 2, 4, 8};
  int d_text = 768;
  double ffn_expansion = 2.66;
  int channel_attention_kernel = 3;
  bool global_residual = true;
  bool sgi_enabled = true;
  // Guidance projections shared by every fusion front-end of a level.
  bool share_guidance = false;
  // Halve channels after the level-1 skip merge as well (decoder output C instead of 2C).
  bool halve_level1_skip = false;

  static BackboneConfig paper();
  static BackboneConfig tiny();
  static BackboneConfig preset(const std::string& name);

  int levels() const { return static_cast<int>(blocks_per_level.size()); }
  int channels_at(int level) const { return base_channels << (level - 1); }
  /// Spatial multiple the network needs (2^(levels-1)).
  int size_multiple() const { return 1 << (levels() - 1); }
  int ffn_hidden(int channels) const { return static_cast<int>(channels * ffn_expansion); }
  int decoder_channels(int level) const;

  /// Throws InvalidArgument on inconsistent settings.
  void validate() const;

  nlohmann::json to_json() const;
  static BackboneConfig from_json(const nlohmann::json& j);
  /// `key = value` lines; lists are comma separated, `#` starts a comment.
  std::string to_text() const;
  static BackboneConfig from_text(const std::string& text);
};

/// Layer normalization over channels at each spatial position, learned scale,
/// no bias. Input [B, C, H, W].
class ChannelLayerNormImpl : public torch::nn::Module {
 public:
  explicit ChannelLayerNormImpl(int channels);
  torch::Tensor forward(const torch::Tensor& x);

  torch::Tensor weight;
};
TORCH_MODULE(ChannelLayerNorm);

/// Maps the guidance vector to per-channel modulation for one block.
class GuidanceProjectionImpl : public torch::nn::Module {
 public:
  GuidanceProjectionImpl(int d_text, int channels);

  torch::nn::Linear text_to_channels{nullptr};  // W_l^1
  torch::nn::Linear scale{nullptr};             // W_l^2
  torch::nn::Linear shift{nullptr};             // W_l^3
};
TORCH_MODULE(GuidanceProjection);

struct FusedFeatures {
  torch::Tensor normalized;  // X0
  torch::Tensor fused;       // Xc (equals X0 when guidance is bypassed)
};

/// Cross-modal channel fusion: layer norm, pooled channel attention weights
/// from a 1-D convolution across channels, gating of the projected guidance,
/// and per-channel affine modulation of the normalized features.
class GuidanceFusionImpl : public torch::nn::Module {
 public:
  GuidanceFusionImpl(int channels, int d_text, int kernel, bool guidance_enabled,
                     GuidanceProjection shared_projection = nullptr);
  /// x [B, C, H, W], z [B, d_text].
  FusedFeatures forward(const torch::Tensor& x, const torch::Tensor& z);

  ChannelLayerNorm norm{nullptr};
  torch::nn::Conv1d channel_conv{nullptr};
  GuidanceProjection projection{nullptr};
  bool guidance_enabled;
  int channels;
  int d_text;
};
TORCH_MODULE(GuidanceFusion);

/// Multi-head attention across channels: attention maps are (C/heads)^2 per head.
class TransposedAttentionImpl : public torch::nn::Module {
 public:
  TransposedAttentionImpl(int channels, int heads);
  /// Returns W_s(attended) + residual.
  torch::Tensor forward(const torch::Tensor& fused, const torch::Tensor& residual);
  /// Softmax-normalized attention maps [B, heads, C/heads, C/heads].
  torch::Tensor attention_maps(const torch::Tensor& fused);

  torch::nn::Conv2d qkv{nullptr};         // point-wise W_s^{Q,K,V}
  torch::nn::Conv2d qkv_depthwise{nullptr};  // 3x3 depth-wise W_d^{Q,K,V}
  torch::nn::Conv2d project_out{nullptr};    // W_s
  torch::Tensor temperature;                 // beta, one per head
  int channels;
  int heads;

 private:
  std::array<torch::Tensor, 3> project(const torch::Tensor& fused);
  torch::Tensor attend(const torch::Tensor& q, const torch::Tensor& k);
};
TORCH_MODULE(TransposedAttention);

class IMTAImpl : public torch::nn::Module {
 public:
  IMTAImpl(int channels, int heads, const BackboneConfig& cfg, GuidanceProjection shared = nullptr);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& z);

  GuidanceFusion fusion{nullptr};
  TransposedAttention attention{nullptr};
};
TORCH_MODULE(IMTA);

/// Guidance-fused gated feed-forward: W_s^0 (GELU(W_d^1 W_s^1 Xc) * W_d^2 W_s^2 Xc) + Xc.
class IGFNImpl : public torch::nn::Module {
 public:
  IGFNImpl(int channels, const BackboneConfig& cfg, GuidanceProjection shared = nullptr);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& z);
  torch::Tensor gate(const torch::Tensor& fused);

  GuidanceFusion fusion{nullptr};
  torch::nn::Conv2d gate_in{nullptr};       // W_s^1
  torch::nn::Conv2d value_in{nullptr};      // W_s^2
  torch::nn::Conv2d gate_depthwise{nullptr};   // W_d^1
  torch::nn::Conv2d value_depthwise{nullptr};  // W_d^2
  torch::nn::Conv2d project_out{nullptr};      // W_s^0
};
TORCH_MODULE(IGFN);

class ITBlockImpl : public torch::nn::Module {
 public:
  ITBlockImpl(int channels, int heads, const BackboneConfig& cfg, GuidanceProjection shared = nullptr);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& z);

  IMTA imta{nullptr};
  IGFN igfn{nullptr};
};
TORCH_MODULE(ITBlock);

/// 3x3 conv C -> C/2 then pixel-unshuffle(2): [B,C,H,W] -> [B,2C,H/2,W/2].
class DownsampleImpl : public torch::nn::Module {
 public:
  explicit DownsampleImpl(int channels);
  torch::Tensor forward(const torch::Tensor& x);
  torch::nn::Conv2d conv{nullptr};
};
TORCH_MODULE(Downsample);

/// 3x3 conv C -> 2C then pixel-shuffle(2): [B,C,H,W] -> [B,C/2,2H,2W].
class UpsampleImpl : public torch::nn::Module {
 public:
  explicit UpsampleImpl(int channels);
  torch::Tensor forward(const torch::Tensor& x);
  torch::nn::Conv2d conv{nullptr};
};
TORCH_MODULE(Upsample);

/// Channel concatenation of decoder and encoder features then a 1x1 conv.
class SkipMergeImpl : public torch::nn::Module {
 public:
  SkipMergeImpl(int in_channels, int out_channels);
  torch::Tensor forward(const torch::Tensor& decoder, const torch::Tensor& encoder);
  torch::nn::Conv2d conv{nullptr};
};
TORCH_MODULE(SkipMerge);

torch::Tensor pixel_unshuffle(const torch::Tensor& x, int64_t factor);
torch::Tensor pixel_shuffle(const torch::Tensor& x, int64_t factor);

struct Diagnostics {
  // Per level (1..levels): channel-mean absolute activation [B, 1, H_l, W_l] of
  // the level's last block (decoder side for levels below the bottleneck).
  std::vector<torch::Tensor> level_activity;
};

class RestorationNetImpl : public torch::nn::Module {
 public:
  explicit RestorationNetImpl(BackboneConfig cfg);

  /// image [B,3,H,W] in [0,1], guidance [B, d_text]. Any H, W: inputs are
  /// reflect-padded to the size multiple and cropped back. Output is not clipped.
  torch::Tensor forward(const torch::Tensor& image, const torch::Tensor& guidance,
                        Diagnostics* diagnostics = nullptr);

  /// One max-normalized [H, W] saliency map per level for a single image
  /// (bilinear resize of the level activity to input resolution).
  std::vector<torch::Tensor> attention_maps(const torch::Tensor& image, const torch::Tensor& guidance);

  const BackboneConfig& config() const { return cfg_; }
  /// Channel count and block count per encoder level, for structural checks.
  std::vector<std::pair<int, int>> encoder_ladder() const;

  torch::nn::Conv2d embed{nullptr};
  torch::nn::ModuleList encoder_blocks;    // one ModuleList of ITBlocks per level (incl. bottleneck)
  torch::nn::ModuleList downsamplers;
  torch::nn::ModuleList upsamplers;
  torch::nn::ModuleList skip_merges;
  torch::nn::ModuleList decoder_blocks;    // levels-1 lists, index 0 = level 1
  torch::nn::Conv2d output{nullptr};

 private:
  torch::Tensor run_blocks(torch::nn::ModuleList& blocks, torch::Tensor x, const torch::Tensor& z);

  BackboneConfig cfg_;
};
TORCH_MODULE(RestorationNet);

/// Sets every weight and bias to zero. Attention temperatures must stay
/// positive and are left unchanged.
void zero_parameters(torch::nn::Module& module);

}  // namespace promptrestore
