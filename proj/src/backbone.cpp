#include "promptrestore/backbone.hpp"

#include <sstream>

#include "promptrestore/common.hpp"

namespace promptrestore {

namespace F = torch::nn::functional;

BackboneConfig BackboneConfig::paper() { return BackboneConfig{}; }

BackboneConfig BackboneConfig::tiny() {
  BackboneConfig cfg;
  cfg.base_channels = 8;
  cfg.blocks_per_level = {1, 1, 1, 2};
  cfg.heads_per_level = {1, 2, 4, 8};
  cfg.d_text = 64;
  return cfg;
}

BackboneConfig BackboneConfig::preset(const std::string& name) {
  if (name == "paper") return paper();
  if (name == "tiny") return tiny();
  throw InvalidArgument("unknown preset '" + name + "' (expected paper or tiny)");
}

int BackboneConfig::decoder_channels(int level) const {
  if (level == levels()) return channels_at(level);
  if (level == 1 && !halve_level1_skip) return 2 * base_channels;
  return channels_at(level);
}

void BackboneConfig::validate() const {
  if (levels() < 2) throw InvalidArgument("backbone needs at least 2 levels");
  if (heads_per_level.size() != blocks_per_level.size()) {
    throw InvalidArgument("heads_per_level and blocks_per_level differ in length");
  }
  if (base_channels < 2 || base_channels % 2 != 0) throw InvalidArgument("base_channels must be even and >= 2");
  if (d_text < 1) throw InvalidArgument("d_text must be positive");
  if (channel_attention_kernel < 1 || channel_attention_kernel % 2 == 0) {
    throw InvalidArgument("channel attention kernel must be odd");
  }
  if (!(ffn_expansion > 0.0)) throw InvalidArgument("ffn_expansion must be positive");
  for (int level = 1; level <= levels(); ++level) {
    const int heads = heads_per_level[level - 1];
    if (blocks_per_level[level - 1] < 1) throw InvalidArgument("each level needs at least one block");
    if (heads < 1 || channels_at(level) % heads != 0) {
      throw InvalidArgument("level " + std::to_string(level) + ": " + std::to_string(channels_at(level)) +
                            " channels not divisible by " + std::to_string(heads) + " heads");
    }
    if (level < levels() && decoder_channels(level) % heads != 0) {
      throw InvalidArgument("level " + std::to_string(level) + ": decoder channels not divisible by heads");
    }
  }
  if (ffn_hidden(base_channels) < 1) throw InvalidArgument("ffn hidden width must be positive");
}

nlohmann::json BackboneConfig::to_json() const {
  return {{"base_channels", base_channels},
          {"blocks_per_level", blocks_per_level},
          {"heads_per_level", heads_per_level},
          {"d_text", d_text},
          {"ffn_expansion", ffn_expansion},
          {"channel_attention_kernel", channel_attention_kernel},
          {"global_residual", global_residual},
          {"sgi_enabled", sgi_enabled},
          {"share_guidance", share_guidance},
          {"halve_level1_skip", halve_level1_skip}};
}

BackboneConfig BackboneConfig::from_json(const nlohmann::json& j) {
  BackboneConfig cfg = j.contains("preset") ? preset(j["preset"].get<std::string>()) : BackboneConfig{};
  cfg.base_channels = j.value("base_channels", cfg.base_channels);
  cfg.blocks_per_level = j.value("blocks_per_level", cfg.blocks_per_level);
  cfg.heads_per_level = j.value("heads_per_level", cfg.heads_per_level);
  cfg.d_text = j.value("d_text", cfg.d_text);
  cfg.ffn_expansion = j.value("ffn_expansion", cfg.ffn_expansion);
  cfg.channel_attention_kernel = j.value("channel_attention_kernel", cfg.channel_attention_kernel);
  cfg.global_residual = j.value("global_residual", cfg.global_residual);
  cfg.sgi_enabled = j.value("sgi_enabled", cfg.sgi_enabled);
  cfg.share_guidance = j.value("share_guidance", cfg.share_guidance);
  cfg.halve_level1_skip = j.value("halve_level1_skip", cfg.halve_level1_skip);
  cfg.validate();
  return cfg;
}

namespace {

std::string join(const std::vector<int>& values) {
  std::string out;
  for (size_t i = 0; i < values.size(); ++i) out += (i ? "," : "") + std::to_string(values[i]);
  return out;
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "on" || v == "1") return true;
  if (v == "false" || v == "off" || v == "0") return false;
  throw InvalidArgument("expected a boolean, got '" + v + "'");
}

}  // namespace

std::string BackboneConfig::to_text() const {
  std::ostringstream out;
  out << "base_channels = " << base_channels << "\n"
      << "blocks_per_level = " << join(blocks_per_level) << "\n"
      << "heads_per_level = " << join(heads_per_level) << "\n"
      << "d_text = " << d_text << "\n"
      << "ffn_expansion = " << ffn_expansion << "\n"
      << "channel_attention_kernel = " << channel_attention_kernel << "\n"
      << "global_residual = " << (global_residual ? "true" : "false") << "\n"
      << "sgi_enabled = " << (sgi_enabled ? "true" : "false") << "\n"
      << "share_guidance = " << (share_guidance ? "true" : "false") << "\n"
      << "halve_level1_skip = " << (halve_level1_skip ? "true" : "false") << "\n";
  return out.str();
}

BackboneConfig BackboneConfig::from_text(const std::string& text) {
  BackboneConfig cfg;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      if (line.find_first_not_of(" \t\r") != std::string::npos) {
        throw InvalidArgument("config line without '=': " + line);
      }
      continue;
    }
    auto trim = [](std::string s) {
      s.erase(0, s.find_first_not_of(" \t\r"));
      s.erase(s.find_last_not_of(" \t\r") + 1);
      return s;
    };
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    auto ints = [&] {
      std::vector<int> out;
      for (const auto& part : split_list(value)) out.push_back(std::stoi(part));
      return out;
    };
    if (key == "preset") {
      cfg = preset(value);
    } else if (key == "base_channels") {
      cfg.base_channels = std::stoi(value);
    } else if (key == "blocks_per_level") {
      cfg.blocks_per_level = ints();
    } else if (key == "heads_per_level") {
      cfg.heads_per_level = ints();
    } else if (key == "d_text") {
      cfg.d_text = std::stoi(value);
    } else if (key == "ffn_expansion") {
      cfg.ffn_expansion = std::stod(value);
    } else if (key == "channel_attention_kernel") {
      cfg.channel_attention_kernel = std::stoi(value);
    } else if (key == "global_residual") {
      cfg.global_residual = parse_bool(value);
    } else if (key == "sgi_enabled") {
      cfg.sgi_enabled = parse_bool(value);
    } else if (key == "share_guidance") {
      cfg.share_guidance = parse_bool(value);
    } else if (key == "halve_level1_skip") {
      cfg.halve_level1_skip = parse_bool(value);
    } else {
      throw InvalidArgument("unknown backbone config key '" + key + "'");
    }
  }
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------

ChannelLayerNormImpl::ChannelLayerNormImpl(int channels) {
  weight = register_parameter("weight", torch::ones({channels}));
}

torch::Tensor ChannelLayerNormImpl::forward(const torch::Tensor& x) {
  const auto mean = x.mean(1, true);
  const auto var = (x - mean).pow(2).mean(1, true);
  return (x - mean) * torch::rsqrt(var + 1e-5) * weight.view({1, -1, 1, 1});
}

GuidanceProjectionImpl::GuidanceProjectionImpl(int d_text, int channels) {
  text_to_channels = register_module("text_to_channels", torch::nn::Linear(d_text, channels));
  scale = register_module("scale", torch::nn::Linear(channels, channels));
  shift = register_module("shift", torch::nn::Linear(channels, channels));
  torch::NoGradGuard no_grad;
  // Start near the identity modulation Xc = X0.
  scale->bias.fill_(1.0);
  shift->bias.zero_();
}

GuidanceFusionImpl::GuidanceFusionImpl(int channels, int d_text, int kernel, bool guidance_enabled,
                                       GuidanceProjection shared_projection)
    : guidance_enabled(guidance_enabled), channels(channels), d_text(d_text) {
  norm = register_module("norm", ChannelLayerNorm(channels));
  if (!guidance_enabled) return;
  channel_conv = register_module(
      "channel_conv", torch::nn::Conv1d(torch::nn::Conv1dOptions(1, 1, kernel).padding(kernel / 2)));
  projection = shared_projection ? shared_projection : GuidanceProjection(d_text, channels);
  register_module("projection", projection);
}

FusedFeatures GuidanceFusionImpl::forward(const torch::Tensor& x, const torch::Tensor& z) {
  if (x.dim() != 4 || x.size(1) != channels) {
    throw InvalidArgument("fusion expects [B," + std::to_string(channels) + ",H,W] features");
  }
  auto x0 = norm(x);
  if (!guidance_enabled) return {x0, x0};
  if (z.dim() != 2 || z.size(0) != x.size(0) || z.size(1) != d_text) {
    throw InvalidArgument("guidance must be [B," + std::to_string(d_text) + "]");
  }
  const auto pooled = x0.mean({2, 3});                                         // [B, C]
  const auto omega = torch::sigmoid(channel_conv(pooled.unsqueeze(1))).squeeze(1);
  const auto xw = omega * projection->text_to_channels(z);
  const auto scale = projection->scale(xw).unsqueeze(-1).unsqueeze(-1);
  const auto shift = projection->shift(xw).unsqueeze(-1).unsqueeze(-1);
  return {x0, scale * x0 + shift};
}

TransposedAttentionImpl::TransposedAttentionImpl(int channels, int heads) : channels(channels), heads(heads) {
  if (heads < 1 || channels % heads != 0) {
    throw InvalidArgument(std::to_string(channels) + " channels not divisible by " + std::to_string(heads) + " heads");
  }
  using torch::nn::Conv2dOptions;
  qkv = register_module("qkv", torch::nn::Conv2d(Conv2dOptions(channels, 3 * channels, 1)));
  qkv_depthwise = register_module(
      "qkv_depthwise",
      torch::nn::Conv2d(Conv2dOptions(3 * channels, 3 * channels, 3).padding(1).groups(3 * channels)));
  project_out = register_module("project_out", torch::nn::Conv2d(Conv2dOptions(channels, channels, 1)));
  temperature = register_parameter("temperature", torch::ones({heads, 1, 1}));
}

std::array<torch::Tensor, 3> TransposedAttentionImpl::project(const torch::Tensor& fused) {
  if (fused.dim() != 4 || fused.size(1) != channels) {
    throw InvalidArgument("attention expects [B," + std::to_string(channels) + ",H,W] features");
  }
  auto parts = qkv_depthwise(qkv(fused)).chunk(3, 1);
  const auto b = fused.size(0);
  const auto hw = fused.size(2) * fused.size(3);
  std::array<torch::Tensor, 3> out;
  for (int i = 0; i < 3; ++i) out[i] = parts[i].reshape({b, heads, channels / heads, hw});
  return out;
}

torch::Tensor TransposedAttentionImpl::attend(const torch::Tensor& q, const torch::Tensor& k) {
  const auto qn = F::normalize(q, F::NormalizeFuncOptions().dim(-1));
  const auto kn = F::normalize(k, F::NormalizeFuncOptions().dim(-1));
  return torch::softmax(torch::matmul(qn, kn.transpose(-2, -1)) / temperature, -1);
}

torch::Tensor TransposedAttentionImpl::attention_maps(const torch::Tensor& fused) {
  auto [q, k, v] = project(fused);
  return attend(q, k);
}

torch::Tensor TransposedAttentionImpl::forward(const torch::Tensor& fused, const torch::Tensor& residual) {
  auto [q, k, v] = project(fused);
  const auto out = torch::matmul(attend(q, k), v).reshape(fused.sizes());
  return project_out(out) + residual;
}

IMTAImpl::IMTAImpl(int channels, int heads, const BackboneConfig& cfg, GuidanceProjection shared) {
  fusion = register_module("fusion", GuidanceFusion(channels, cfg.d_text, cfg.channel_attention_kernel,
                                                    cfg.sgi_enabled, shared));
  attention = register_module("attention", TransposedAttention(channels, heads));
}

torch::Tensor IMTAImpl::forward(const torch::Tensor& x, const torch::Tensor& z) {
  return attention(fusion(x, z).fused, x);
}

IGFNImpl::IGFNImpl(int channels, const BackboneConfig& cfg, GuidanceProjection shared) {
  using torch::nn::Conv2dOptions;
  const int hidden = cfg.ffn_hidden(channels);
  fusion = register_module("fusion", GuidanceFusion(channels, cfg.d_text, cfg.channel_attention_kernel,
                                                    cfg.sgi_enabled, shared));
  gate_in = register_module("gate_in", torch::nn::Conv2d(Conv2dOptions(channels, hidden, 1)));
  value_in = register_module("value_in", torch::nn::Conv2d(Conv2dOptions(channels, hidden, 1)));
  gate_depthwise = register_module(
      "gate_depthwise", torch::nn::Conv2d(Conv2dOptions(hidden, hidden, 3).padding(1).groups(hidden)));
  value_depthwise = register_module(
      "value_depthwise", torch::nn::Conv2d(Conv2dOptions(hidden, hidden, 3).padding(1).groups(hidden)));
  project_out = register_module("project_out", torch::nn::Conv2d(Conv2dOptions(hidden, channels, 1)));
}

torch::Tensor IGFNImpl::gate(const torch::Tensor& fused) {
  return torch::gelu(gate_depthwise(gate_in(fused))) * value_depthwise(value_in(fused));
}

torch::Tensor IGFNImpl::forward(const torch::Tensor& x, const torch::Tensor& z) {
  const auto fused = fusion(x, z).fused;
  return project_out(gate(fused)) + fused;
}

ITBlockImpl::ITBlockImpl(int channels, int heads, const BackboneConfig& cfg, GuidanceProjection shared) {
  imta = register_module("imta", IMTA(channels, heads, cfg, shared));
  igfn = register_module("igfn", IGFN(channels, cfg, shared));
}

torch::Tensor ITBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& z) {
  return igfn(imta(x, z), z);
}

torch::Tensor pixel_unshuffle(const torch::Tensor& x, int64_t factor) {
  const auto b = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
  if (h % factor != 0 || w % factor != 0) {
    throw InvalidArgument("pixel-unshuffle needs dimensions divisible by " + std::to_string(factor));
  }
  return x.reshape({b, c, h / factor, factor, w / factor, factor})
      .permute({0, 1, 3, 5, 2, 4})
      .reshape({b, c * factor * factor, h / factor, w / factor});
}

torch::Tensor pixel_shuffle(const torch::Tensor& x, int64_t factor) {
  const auto b = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
  if (c % (factor * factor) != 0) throw InvalidArgument("pixel-shuffle needs channels divisible by factor^2");
  const auto oc = c / (factor * factor);
  return x.reshape({b, oc, factor, factor, h, w})
      .permute({0, 1, 4, 2, 5, 3})
      .reshape({b, oc, h * factor, w * factor});
}

DownsampleImpl::DownsampleImpl(int channels) {
  if (channels % 2 != 0) throw InvalidArgument("downsample needs an even channel count");
  conv = register_module(
      "conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels / 2, 3).padding(1)));
}

torch::Tensor DownsampleImpl::forward(const torch::Tensor& x) {
  if (x.size(2) % 2 != 0 || x.size(3) % 2 != 0) {
    throw InvalidArgument("downsample needs even spatial dimensions");
  }
  return promptrestore::pixel_unshuffle(conv(x), 2);
}

UpsampleImpl::UpsampleImpl(int channels) {
  conv = register_module(
      "conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, 2 * channels, 3).padding(1)));
}

torch::Tensor UpsampleImpl::forward(const torch::Tensor& x) { return promptrestore::pixel_shuffle(conv(x), 2); }

SkipMergeImpl::SkipMergeImpl(int in_channels, int out_channels) {
  conv = register_module("conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels, out_channels, 1)));
}

torch::Tensor SkipMergeImpl::forward(const torch::Tensor& decoder, const torch::Tensor& encoder) {
  if (decoder.size(2) != encoder.size(2) || decoder.size(3) != encoder.size(3)) {
    throw InvalidArgument("skip merge: spatial dimensions differ");
  }
  return conv(torch::cat({decoder, encoder}, 1));
}

// ---------------------------------------------------------------------------

RestorationNetImpl::RestorationNetImpl(BackboneConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  using torch::nn::Conv2dOptions;
  const int levels = cfg_.levels();
  embed = register_module("embed", torch::nn::Conv2d(Conv2dOptions(3, cfg_.base_channels, 3).padding(1)));

  auto make_blocks = [&](int channels, int heads, int count) {
    torch::nn::ModuleList list;
    GuidanceProjection shared{nullptr};
    if (cfg_.share_guidance && cfg_.sgi_enabled) shared = GuidanceProjection(cfg_.d_text, channels);
    for (int i = 0; i < count; ++i) list->push_back(ITBlock(channels, heads, cfg_, shared));
    return list;
  };

  for (int level = 1; level <= levels; ++level) {
    encoder_blocks->push_back(make_blocks(cfg_.channels_at(level), cfg_.heads_per_level[level - 1],
                                          cfg_.blocks_per_level[level - 1]));
    if (level < levels) downsamplers->push_back(Downsample(cfg_.channels_at(level)));
  }
  for (int level = 1; level < levels; ++level) {
    upsamplers->push_back(Upsample(cfg_.decoder_channels(level + 1)));
    skip_merges->push_back(SkipMerge(2 * cfg_.channels_at(level), cfg_.decoder_channels(level)));
    decoder_blocks->push_back(make_blocks(cfg_.decoder_channels(level), cfg_.heads_per_level[level - 1],
                                          cfg_.blocks_per_level[level - 1]));
  }
  register_module("encoder_blocks", encoder_blocks);
  register_module("downsamplers", downsamplers);
  register_module("upsamplers", upsamplers);
  register_module("skip_merges", skip_merges);
  register_module("decoder_blocks", decoder_blocks);
  output = register_module("output",
                           torch::nn::Conv2d(Conv2dOptions(cfg_.decoder_channels(1), 3, 3).padding(1)));
}

torch::Tensor RestorationNetImpl::run_blocks(torch::nn::ModuleList& blocks, torch::Tensor x,
                                             const torch::Tensor& z) {
  for (const auto& block : *blocks) x = block->as<ITBlockImpl>()->forward(x, z);
  return x;
}

torch::Tensor RestorationNetImpl::forward(const torch::Tensor& image, const torch::Tensor& guidance,
                                          Diagnostics* diagnostics) {
  if (image.dim() != 4 || image.size(1) != 3) throw InvalidArgument("image batch must be [B,3,H,W]");
  const int levels = cfg_.levels();
  const int64_t h = image.size(2), w = image.size(3), m = cfg_.size_multiple();
  const int64_t pad_h = (m - h % m) % m, pad_w = (m - w % m) % m;
  torch::Tensor x = image;
  if (pad_h || pad_w) {
    const bool reflect = pad_h < h && pad_w < w;
    auto options = F::PadFuncOptions({0, pad_w, 0, pad_h});
    if (reflect) {
      options.mode(torch::kReflect);
    } else {
      options.mode(torch::kReplicate);
    }
    x = F::pad(x, options);
  }

  std::vector<torch::Tensor> skips;
  torch::Tensor feat = embed(x);
  for (int level = 1; level <= levels; ++level) {
    torch::nn::ModuleList list(std::dynamic_pointer_cast<torch::nn::ModuleListImpl>(encoder_blocks->ptr(level - 1)));
    feat = run_blocks(list, feat, guidance);
    if (level < levels) {
      skips.push_back(feat);
      feat = downsamplers[level - 1]->as<DownsampleImpl>()->forward(feat);
    }
  }
  std::vector<torch::Tensor> activity(levels);
  if (diagnostics) activity[levels - 1] = feat.abs().mean(1, true);

  for (int level = levels - 1; level >= 1; --level) {
    feat = upsamplers[level - 1]->as<UpsampleImpl>()->forward(feat);
    feat = skip_merges[level - 1]->as<SkipMergeImpl>()->forward(feat, skips[level - 1]);
    torch::nn::ModuleList list(std::dynamic_pointer_cast<torch::nn::ModuleListImpl>(decoder_blocks->ptr(level - 1)));
    feat = run_blocks(list, feat, guidance);
    if (diagnostics) activity[level - 1] = feat.abs().mean(1, true);
  }

  torch::Tensor out = output(feat);
  if (cfg_.global_residual) out = out + x;
  if (pad_h || pad_w) out = out.index({torch::indexing::Slice(), torch::indexing::Slice(),
                                       torch::indexing::Slice(0, h), torch::indexing::Slice(0, w)});
  if (diagnostics) diagnostics->level_activity = std::move(activity);
  return out;
}

std::vector<torch::Tensor> RestorationNetImpl::attention_maps(const torch::Tensor& image,
                                                              const torch::Tensor& guidance) {
  Diagnostics diag;
  forward(image, guidance, &diag);
  const int64_t h = image.size(2), w = image.size(3);
  const int64_t m = cfg_.size_multiple();
  const int64_t ph = h + (m - h % m) % m, pw = w + (m - w % m) % m;
  std::vector<torch::Tensor> maps;
  for (const auto& act : diag.level_activity) {
    auto up = F::interpolate(act, F::InterpolateFuncOptions()
                                      .size(std::vector<int64_t>{ph, pw})
                                      .mode(torch::kBilinear)
                                      .align_corners(false));
    auto map = up.index({0, 0, torch::indexing::Slice(0, h), torch::indexing::Slice(0, w)}).clamp_min(0.0);
    const auto peak = map.max();
    if (peak.item<double>() > 0.0) map = map / peak;
    maps.push_back(map.contiguous());
  }
  return maps;
}

std::vector<std::pair<int, int>> RestorationNetImpl::encoder_ladder() const {
  std::vector<std::pair<int, int>> ladder;
  for (size_t level = 0; level < encoder_blocks->size(); ++level) {
    auto list = std::dynamic_pointer_cast<torch::nn::ModuleListImpl>(encoder_blocks->ptr(level));
    const auto* first = list->ptr(0)->as<ITBlockImpl>();
    ladder.emplace_back(static_cast<int>(first->imta->attention->channels), static_cast<int>(list->size()));
  }
  return ladder;
}

void zero_parameters(torch::nn::Module& module) {
  torch::NoGradGuard no_grad;
  for (auto& item : module.named_parameters()) {
    const auto& name = item.key();
    if (name == "temperature" || name.ends_with(".temperature")) continue;
    item.value().zero_();
  }
}

}  // namespace promptrestore
