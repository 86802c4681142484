#include "promptrestore/textenc.hpp"

#include <cmath>
#include <iostream>

#include "promptrestore/optim.hpp"

namespace promptrestore {

TextEncoderConfig TextEncoderConfig::paper(int64_t vocab_size) {
  TextEncoderConfig cfg;
  cfg.vocab_size = vocab_size;
  return cfg;
}

TextEncoderConfig TextEncoderConfig::tiny(int64_t vocab_size) {
  TextEncoderConfig cfg;
  cfg.vocab_size = vocab_size;
  cfg.d_model = 64;
  return cfg;
}

void TextEncoderConfig::validate() const {
  if (vocab_size <= special_tokens::kCount) throw InvalidArgument("vocabulary too small");
  if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0) {
    throw InvalidArgument("d_model must be divisible by n_heads");
  }
  if (n_layers < 1) throw InvalidArgument("encoder needs at least one layer");
  if (max_len < 3) throw InvalidArgument("max_len must be >= 3");
  if (!(mask_prob > 0.0 && mask_prob < 1.0)) throw InvalidArgument("mask_prob must lie in (0, 1)");
}

nlohmann::json TextEncoderConfig::to_json() const {
  return {{"vocab_size", vocab_size}, {"d_model", d_model},     {"n_layers", n_layers},
          {"n_heads", n_heads},       {"max_len", max_len},     {"mask_prob", mask_prob},
          {"ffn_mult", ffn_mult}};
}

TextEncoderConfig TextEncoderConfig::from_json(const nlohmann::json& j) {
  TextEncoderConfig cfg;
  cfg.vocab_size = j.at("vocab_size").get<int64_t>();
  cfg.d_model = j.value("d_model", cfg.d_model);
  cfg.n_layers = j.value("n_layers", cfg.n_layers);
  cfg.n_heads = j.value("n_heads", cfg.n_heads);
  cfg.max_len = j.value("max_len", cfg.max_len);
  cfg.mask_prob = j.value("mask_prob", cfg.mask_prob);
  cfg.ffn_mult = j.value("ffn_mult", cfg.ffn_mult);
  cfg.validate();
  return cfg;
}

torch::Tensor GuidanceVector::tensor() const {
  return torch::tensor(values, torch::kFloat32);
}

GuidanceVector GuidanceVector::from_tensor(const torch::Tensor& t) {
  auto flat = t.detach().to(torch::kFloat32).contiguous().view(-1);
  const float* data = flat.data_ptr<float>();
  return {std::vector<float>(data, data + flat.numel())};
}

EncoderLayerImpl::EncoderLayerImpl(int d_model, int n_heads, int ffn_mult) : n_heads(n_heads) {
  attn_norm = register_module("attn_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d_model})));
  qkv = register_module("qkv", torch::nn::Linear(d_model, 3 * d_model));
  attn_out = register_module("attn_out", torch::nn::Linear(d_model, d_model));
  ffn_norm = register_module("ffn_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d_model})));
  ffn_in = register_module("ffn_in", torch::nn::Linear(d_model, ffn_mult * d_model));
  ffn_out = register_module("ffn_out", torch::nn::Linear(ffn_mult * d_model, d_model));
}

torch::Tensor EncoderLayerImpl::forward(const torch::Tensor& x, const torch::Tensor& key_padding) {
  const auto b = x.size(0), t = x.size(1), d = x.size(2), dh = d / n_heads;
  auto parts = qkv(attn_norm(x)).view({b, t, 3, n_heads, dh}).permute({2, 0, 3, 1, 4});
  const auto q = parts[0], k = parts[1], v = parts[2];  // [B,H,T,dh]
  auto scores = torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(dh));
  const auto blocked = (key_padding == 0).view({b, 1, 1, t});
  scores = scores.masked_fill(blocked, -1e9);
  auto attended = torch::matmul(torch::softmax(scores, -1), v).transpose(1, 2).reshape({b, t, d});
  auto h = x + attn_out(attended);
  return h + ffn_out(torch::gelu(ffn_in(ffn_norm(h))));
}

TextEncoderImpl::TextEncoderImpl(TextEncoderConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const int d = cfg_.d_model;
  token_embedding = register_module("token_embedding", torch::nn::Embedding(cfg_.vocab_size, d));
  position_embedding = register_module("position_embedding", torch::nn::Embedding(cfg_.max_len, d));
  segment_embedding = register_module("segment_embedding", torch::nn::Embedding(2, d));
  for (int i = 0; i < cfg_.n_layers; ++i) layers->push_back(EncoderLayer(d, cfg_.n_heads, cfg_.ffn_mult));
  register_module("layers", layers);
  final_norm = register_module("final_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d})));
  mlm_transform = register_module("mlm_transform", torch::nn::Linear(d, d));
  mlm_norm = register_module("mlm_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d})));
  mlm_bias = register_parameter("mlm_bias", torch::zeros({cfg_.vocab_size}));
  pair_head = register_module("pair_head", torch::nn::Linear(4 * d, 2));
  torch::NoGradGuard no_grad;
  for (auto* emb : {&token_embedding, &position_embedding, &segment_embedding}) {
    (*emb)->weight.normal_(0.0, 0.02);
  }
}

torch::Tensor TextEncoderImpl::forward(const torch::Tensor& ids, const torch::Tensor& mask,
                                       const torch::Tensor& segments) {
  if (ids.dim() != 2 || ids.size(1) > cfg_.max_len) {
    throw InvalidArgument("token batch must be [B,T] with T <= max_len");
  }
  const auto positions = torch::arange(ids.size(1), torch::kLong).unsqueeze(0);
  auto x = token_embedding(ids) + position_embedding(positions) + segment_embedding(segments);
  for (const auto& layer : *layers) x = layer->as<EncoderLayerImpl>()->forward(x, mask);
  return final_norm(x);
}

Encoded TextEncoderImpl::encode(const TokenSequence& tokens) {
  if (tokens.length() == 0) throw InvalidArgument("cannot encode an empty token sequence");
  const auto n = std::min<size_t>(tokens.length(), cfg_.max_len);
  const bool truncated = n < tokens.length();
  if (truncated) {
    std::clog << "warning: token sequence of length " << tokens.length() << " truncated to "
              << cfg_.max_len << "\n";
  }
  auto slice = [&](const std::vector<int64_t>& v) {
    std::vector<int64_t> out(v.begin(), v.begin() + n);
    if (out.size() < n) out.resize(n, 0);
    return torch::tensor(out, torch::kLong).unsqueeze(0);
  };
  const auto states = forward(slice(tokens.ids), slice(tokens.attention_mask), slice(tokens.segments));
  return {states.squeeze(0), truncated};
}

torch::Tensor TextEncoderImpl::mlm_logits(const torch::Tensor& states) {
  const auto h = mlm_norm(torch::gelu(mlm_transform(states)));
  return torch::matmul(h, token_embedding->weight.t()) + mlm_bias;
}

torch::Tensor TextEncoderImpl::pair_logits(const torch::Tensor& states, const torch::Tensor& mask,
                                           const torch::Tensor& segments) {
  const auto u = pool_guidance(states, mask * (segments == 0));
  const auto v = pool_guidance(states, mask * (segments == 1));
  return pair_head(torch::cat({u, v, (u - v).abs(), u * v}, 1));
}

torch::Tensor pool_guidance(const torch::Tensor& states, const torch::Tensor& mask) {
  const auto m = mask.to(states.dtype()).unsqueeze(-1);
  const auto count = m.sum(-2);
  if ((count <= 0).any().item<bool>()) throw InvalidArgument("guidance pooling needs an unmasked position");
  return (states * m).sum(-2) / count;
}

GuidanceVector pool_guidance(const torch::Tensor& states, const std::vector<int64_t>& mask) {
  if (static_cast<int64_t>(mask.size()) < states.size(0)) throw InvalidArgument("mask shorter than sequence");
  std::vector<int64_t> m(mask.begin(), mask.begin() + states.size(0));
  return GuidanceVector::from_tensor(pool_guidance(states, torch::tensor(m, torch::kLong)));
}

GuidanceVector embed_text(TextEncoder& encoder, const InstructionCorpus& corpus, const std::string& text) {
  torch::NoGradGuard no_grad;
  const bool was_training = encoder->is_training();
  encoder->eval();
  const auto tokens = corpus.tokenize(text);
  const auto encoded = encoder->encode(tokens);
  auto z = pool_guidance(encoded.states, tokens.attention_mask);
  encoder->train(was_training);
  return z;
}

MaskedTokens mlm_mask(const TokenSequence& tokens, double mask_prob, int64_t vocab_size, Rng& rng) {
  MaskedTokens out{tokens, std::vector<int64_t>(tokens.length(), -100), {}};
  for (size_t i = 0; i < tokens.length(); ++i) {
    const int64_t id = tokens.ids[i];
    if (is_special_token(id) || uniform_unit(rng) >= mask_prob) continue;
    out.positions.push_back(i);
    out.targets[i] = id;
    const double r = uniform_unit(rng);
    if (r < 0.8) {
      out.corrupted.ids[i] = special_tokens::kMask;
    } else if (r < 0.9) {
      out.corrupted.ids[i] =
          special_tokens::kCount + static_cast<int64_t>(uniform_index(rng, vocab_size - special_tokens::kCount));
    }
  }
  return out;
}

std::vector<SentencePair> nsp_pairs(const InstructionCorpus& corpus, size_t n_pairs, Rng& rng) {
  std::vector<std::vector<const Instruction*>> cells;
  std::vector<DegradationType> rich;  // categories with >= 2 sentences
  for (auto type : kAllDegradations) {
    auto cell = corpus.cell(type, Split::train);
    if (cell.size() >= 2) rich.push_back(type);
    cells.push_back(std::move(cell));
  }
  std::vector<DegradationType> present;
  for (auto type : kAllDegradations) {
    if (!cells[static_cast<size_t>(type)].empty()) present.push_back(type);
  }
  if (rich.empty() || present.size() < 2) {
    throw InvalidArgument("sentence pairs need >= 2 categories and one category with >= 2 sentences");
  }
  std::vector<SentencePair> pairs;
  pairs.reserve(n_pairs);
  for (size_t n = 0; n < n_pairs; ++n) {
    SentencePair pair;
    if (uniform_index(rng, 2) == 1) {
      const auto& cell = cells[static_cast<size_t>(rich[uniform_index(rng, rich.size())])];
      const size_t i = uniform_index(rng, cell.size());
      size_t j = uniform_index(rng, cell.size() - 1);
      if (j >= i) ++j;
      pair = {cell[i]->text, cell[j]->text, 1, {}};
    } else {
      const size_t a = uniform_index(rng, present.size());
      size_t b = uniform_index(rng, present.size() - 1);
      if (b >= a) ++b;
      const auto& ca = cells[static_cast<size_t>(present[a])];
      const auto& cb = cells[static_cast<size_t>(present[b])];
      pair = {ca[uniform_index(rng, ca.size())]->text, cb[uniform_index(rng, cb.size())]->text, 0, {}};
    }
    pair.tokens = corpus.tokenize_pair(pair.first, pair.second);
    pairs.push_back(std::move(pair));
  }
  return pairs;
}

FinetuneResult finetune(const InstructionCorpus& corpus, const TextEncoderConfig& cfg,
                        const FinetuneOptions& options) {
  if (options.steps < 1) throw InvalidArgument("finetune needs steps >= 1");
  if (options.batch_size < 1) throw InvalidArgument("finetune needs batch_size >= 1");
  torch::manual_seed(options.seed);
  Rng rng(options.seed);
  TextEncoder encoder(cfg);
  encoder->train();
  AdamW optimizer(unique_named_parameters(*encoder),
                  {options.lr, options.beta1, options.beta2, 1e-8, options.weight_decay});
  FinetuneResult result{encoder, {}};

  for (int64_t step = 1; step <= options.steps; ++step) {
    auto pairs = nsp_pairs(corpus, options.batch_size, rng);
    size_t len = 0;
    std::vector<MaskedTokens> masked;
    std::vector<int64_t> labels;
    for (auto& pair : pairs) {
      auto& tok = pair.tokens;
      if (tok.length() > static_cast<size_t>(cfg.max_len)) {
        tok.ids.resize(cfg.max_len);
        tok.ids.back() = special_tokens::kSep;
        tok.attention_mask.resize(cfg.max_len);
        tok.segments.resize(cfg.max_len);
        tok.segments.back() = 1;
      }
      masked.push_back(mlm_mask(tok, cfg.mask_prob, cfg.vocab_size, rng));
      labels.push_back(pair.label);
      len = std::max(len, tok.length());
    }
    const auto b = static_cast<int64_t>(masked.size());
    const auto t_len = static_cast<int64_t>(len);
    std::vector<int64_t> ids_v(b * t_len, special_tokens::kPad), mask_v(b * t_len, 0), seg_v(b * t_len, 0),
        target_v(b * t_len, -100);
    for (int64_t i = 0; i < b; ++i) {
      const auto& m = masked[i];
      for (size_t t = 0; t < m.corrupted.length(); ++t) {
        ids_v[i * t_len + t] = m.corrupted.ids[t];
        mask_v[i * t_len + t] = m.corrupted.attention_mask[t];
        seg_v[i * t_len + t] = m.corrupted.segments[t];
        target_v[i * t_len + t] = m.targets[t];
      }
    }
    auto as_batch = [&](const std::vector<int64_t>& v) { return torch::tensor(v, torch::kLong).view({b, t_len}); };
    const auto ids = as_batch(ids_v);
    const auto mask = as_batch(mask_v);
    const auto segments = as_batch(seg_v);
    const auto targets = as_batch(target_v);

    optimizer.zero_grad();
    const auto states = encoder->forward(ids, mask, segments);
    const auto pair_loss = torch::nn::functional::cross_entropy(encoder->pair_logits(states, mask, segments),
                                                                torch::tensor(labels, torch::kLong));
    torch::Tensor mlm_loss = torch::zeros({});
    if ((targets != -100).any().item<bool>()) {
      mlm_loss = torch::nn::functional::cross_entropy(
          encoder->mlm_logits(states).view({-1, cfg.vocab_size}), targets.view({-1}),
          torch::nn::functional::CrossEntropyFuncOptions().ignore_index(-100));
    }
    const auto loss = mlm_loss + pair_loss;
    const double value = loss.item<double>();
    if (!std::isfinite(value)) throw TrainingFailure(step, "non-finite encoder loss");
    loss.backward();
    optimizer.step();
    if (options.log_every > 0 && (step % options.log_every == 0 || step == options.steps)) {
      result.log.push_back({step, mlm_loss.item<double>(), pair_loss.item<double>()});
    }
  }
  encoder->eval();
  return result;
}

DegradationType CategoryCentroids::nearest(const std::vector<double>& z) const {
  const auto d = distances(z);
  size_t best = 0;
  for (size_t i = 1; i < d.size(); ++i) {
    if (d[i] < d[best]) best = i;
  }
  return static_cast<DegradationType>(best);
}

std::array<double, 3> CategoryCentroids::distances(const std::vector<double>& z) const {
  std::array<double, 3> out{};
  for (size_t c = 0; c < 3; ++c) {
    if (centroids[c].size() != z.size()) throw InvalidArgument("centroid dimension mismatch");
    double s = 0.0;
    for (size_t k = 0; k < z.size(); ++k) s += (z[k] - centroids[c][k]) * (z[k] - centroids[c][k]);
    out[c] = std::sqrt(s);
  }
  return out;
}

nlohmann::json CategoryCentroids::to_json() const {
  nlohmann::json j;
  for (auto type : kAllDegradations) j[std::string(to_string(type))] = centroids[static_cast<size_t>(type)];
  return j;
}

CategoryCentroids CategoryCentroids::from_json(const nlohmann::json& j) {
  CategoryCentroids out;
  for (auto type : kAllDegradations) {
    out.centroids[static_cast<size_t>(type)] = j.at(std::string(to_string(type))).get<std::vector<double>>();
  }
  return out;
}

CategoryCentroids compute_centroids(TextEncoder& encoder, const InstructionCorpus& corpus, Split split) {
  CategoryCentroids out;
  for (auto type : kAllDegradations) {
    const auto cell = corpus.cell(type, split);
    if (cell.empty()) throw NotFound("no sentences for centroid of " + std::string(to_string(type)));
    std::vector<double> sum;
    for (const auto* ins : cell) {
      const auto z = embed_text(encoder, corpus, ins->text);
      if (sum.empty()) sum.assign(z.size(), 0.0);
      for (size_t k = 0; k < z.size(); ++k) sum[k] += z.values[k];
    }
    for (double& v : sum) v /= static_cast<double>(cell.size());
    out.centroids[static_cast<size_t>(type)] = std::move(sum);
  }
  return out;
}

}  // namespace promptrestore
