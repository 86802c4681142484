#pragma once

#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"
#include "promptrestore/corpus.hpp"

namespace promptrestore {

struct TextEncoderConfig {
  int64_t vocab_size = 0;
  int d_model = 768;
  int n_layers = 4;
  int n_heads = 4;
  int max_len = 32;
  double mask_prob = 0.15;
  int ffn_mult = 4;

  static TextEncoderConfig paper(int64_t vocab_size);
  static TextEncoderConfig tiny(int64_t vocab_size);

  void validate() const;
  nlohmann::json to_json() const;
  static TextEncoderConfig from_json(const nlohmann::json& j);
};

/// Sentence-level guidance vector (1 x d_model).
struct GuidanceVector {
  std::vector<float> values;

  size_t size() const { return values.size(); }
  torch::Tensor tensor() const;  // [d_model]
  static GuidanceVector from_tensor(const torch::Tensor& t);
};

class EncoderLayerImpl : public torch::nn::Module {
 public:
  EncoderLayerImpl(int d_model, int n_heads, int ffn_mult);
  /// x [B,T,D]; key_padding [B,T] with 1 for real tokens.
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& key_padding);

  torch::nn::LayerNorm attn_norm{nullptr};
  torch::nn::Linear qkv{nullptr};
  torch::nn::Linear attn_out{nullptr};
  torch::nn::LayerNorm ffn_norm{nullptr};
  torch::nn::Linear ffn_in{nullptr};
  torch::nn::Linear ffn_out{nullptr};
  int n_heads;
};
TORCH_MODULE(EncoderLayer);

struct Encoded {
  torch::Tensor states;  // [T, D] (single sequence) or [B, T, D]
  bool truncated = false;
};

/// Bidirectional pre-norm transformer with learned token, position and
/// segment embeddings plus MLM and sentence-pair heads.
class TextEncoderImpl : public torch::nn::Module {
 public:
  explicit TextEncoderImpl(TextEncoderConfig cfg);

  /// ids/mask/segments [B,T] (int64). Returns final-layer-norm token states [B,T,D].
  torch::Tensor forward(const torch::Tensor& ids, const torch::Tensor& mask, const torch::Tensor& segments);

  /// Single sequence; sequences longer than max_len are truncated (flagged).
  Encoded encode(const TokenSequence& tokens);

  torch::Tensor mlm_logits(const torch::Tensor& states);  // [B,T,V]
  /// [B,2] from the pooled vectors u, v of the two segments: head([u, v, |u - v|, u * v]).
  torch::Tensor pair_logits(const torch::Tensor& states, const torch::Tensor& mask, const torch::Tensor& segments);

  const TextEncoderConfig& config() const { return cfg_; }

  torch::nn::Embedding token_embedding{nullptr};
  torch::nn::Embedding position_embedding{nullptr};
  torch::nn::Embedding segment_embedding{nullptr};
  torch::nn::ModuleList layers;
  torch::nn::LayerNorm final_norm{nullptr};
  torch::nn::Linear mlm_transform{nullptr};
  torch::nn::LayerNorm mlm_norm{nullptr};
  torch::Tensor mlm_bias;
  torch::nn::Linear pair_head{nullptr};

 private:
  TextEncoderConfig cfg_;
};
TORCH_MODULE(TextEncoder);

/// Mean over positions with mask == 1. states [T,D] or [B,T,D]; mask [T] or [B,T].
torch::Tensor pool_guidance(const torch::Tensor& states, const torch::Tensor& mask);
GuidanceVector pool_guidance(const torch::Tensor& states, const std::vector<int64_t>& mask);

/// Eval-mode, no-grad tokenize -> encode -> pool.
GuidanceVector embed_text(TextEncoder& encoder, const InstructionCorpus& corpus, const std::string& text);

struct MaskedTokens {
  TokenSequence corrupted;
  std::vector<int64_t> targets;    // original id at selected positions, -100 elsewhere
  std::vector<size_t> positions;   // selected positions
};

/// Selects each non-special position with probability mask_prob; selected
/// positions become [MASK] (80%), a random non-special id (10%) or stay (10%).
MaskedTokens mlm_mask(const TokenSequence& tokens, double mask_prob, int64_t vocab_size, Rng& rng);

struct SentencePair {
  std::string first;
  std::string second;
  int label = 0;  // 1 when both sentences share a category
  TokenSequence tokens;
};

/// Balanced same-category (label 1) / cross-category (label 0) pairs from the train split.
std::vector<SentencePair> nsp_pairs(const InstructionCorpus& corpus, size_t n_pairs, Rng& rng);

struct FinetuneOptions {
  int64_t steps = 2000;
  int batch_size = 32;
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 1e-4;
  uint64_t seed = 0;
  int log_every = 1;
};

struct FinetuneLogEntry {
  int64_t step = 0;
  double mlm_loss = 0.0;
  double pair_loss = 0.0;
  double loss() const { return mlm_loss + pair_loss; }
};

struct FinetuneResult {
  TextEncoder encoder{nullptr};
  std::vector<FinetuneLogEntry> log;
};

/// MLM + sentence-pair training on the train split. Throws TrainingFailure on a
/// non-finite loss and InvalidArgument when steps < 1.
FinetuneResult finetune(const InstructionCorpus& corpus, const TextEncoderConfig& cfg,
                        const FinetuneOptions& options);

/// Class centroids of guidance vectors for a corpus split (index = DegradationType).
struct CategoryCentroids {
  std::array<std::vector<double>, 3> centroids;

  DegradationType nearest(const std::vector<double>& z) const;
  std::array<double, 3> distances(const std::vector<double>& z) const;
  nlohmann::json to_json() const;
  static CategoryCentroids from_json(const nlohmann::json& j);
};

CategoryCentroids compute_centroids(TextEncoder& encoder, const InstructionCorpus& corpus, Split split);

}  // namespace promptrestore
