#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "promptrestore/common.hpp"

namespace promptrestore {

enum class Split { train, heldout };

std::string_view to_string(Split split);
Split parse_split(std::string_view name);

struct Instruction {
  std::string text;
  DegradationType category = DegradationType::noise;
  Split split = Split::train;

  friend bool operator==(const Instruction&, const Instruction&) = default;
};

struct TokenSequence {
  std::vector<int64_t> ids;
  std::vector<int64_t> attention_mask;
  // Sentence index per position (0 for the first sentence and its [CLS]/[SEP]).
  std::vector<int64_t> segments;

  size_t length() const { return ids.size(); }
};

namespace special_tokens {
inline constexpr int64_t kPad = 0;
inline constexpr int64_t kMask = 1;
inline constexpr int64_t kCls = 2;
inline constexpr int64_t kSep = 3;
inline constexpr int64_t kUnk = 4;
inline constexpr int64_t kCount = 5;
inline constexpr std::string_view kNames[] = {"[PAD]", "[MASK]", "[CLS]", "[SEP]", "[UNK]"};
}  // namespace special_tokens

inline bool is_special_token(int64_t id) { return id >= 0 && id < special_tokens::kCount; }

/// Lowercases and splits on whitespace; punctuation characters become
/// standalone tokens.
std::vector<std::string> pre_tokenize(std::string_view text);

/// Instruction sentences grouped by degradation category with a closed-world
/// vocabulary. Immutable after construction.
class InstructionCorpus {
 public:
  static constexpr int kMinPerCategory = 10;

  /// Builds the vocabulary from the instructions.
  explicit InstructionCorpus(std::vector<Instruction> instructions);
  InstructionCorpus(std::vector<Instruction> instructions, std::vector<std::string> vocabulary);

  /// Deterministic paraphrase expansion: exactly per_category sentences for
  /// each of the three categories, 80/20 train/held-out split per category.
  static InstructionCorpus generate(uint64_t seed, int per_category);

  const std::vector<Instruction>& instructions() const { return instructions_; }
  const std::vector<std::string>& vocabulary() const { return vocabulary_; }
  int64_t vocab_size() const { return static_cast<int64_t>(vocabulary_.size()); }

  std::vector<const Instruction*> cell(DegradationType category, Split split) const;
  size_t count(DegradationType category) const;

  /// Uniform draw from the (category, split) cell; NotFound if the cell is empty.
  const Instruction& sample(DegradationType category, Split split, Rng& rng) const;

  int64_t token_id(std::string_view token) const;
  const std::string& token(int64_t id) const;

  /// [CLS] words... [SEP]; unknown words map to [UNK].
  TokenSequence tokenize(std::string_view text) const;
  /// [CLS] a [SEP] b [SEP] with segment ids 0/1.
  TokenSequence tokenize_pair(std::string_view first, std::string_view second) const;
  /// Joins non-special tokens with single spaces.
  std::string detokenize(const std::vector<int64_t>& ids) const;

  std::string serialize() const;
  std::string serialize_vocabulary() const;
  void save(const std::filesystem::path& path) const;
  /// Reads `path` and, if present, the vocabulary file `path.vocab`.
  static InstructionCorpus load(const std::filesystem::path& path);
  static InstructionCorpus parse(std::string_view text);

 private:
  void validate() const;
  void index_vocabulary();

  std::vector<Instruction> instructions_;
  std::vector<std::string> vocabulary_;
  std::unordered_map<std::string, int64_t> token_ids_;
};

std::filesystem::path vocabulary_path(const std::filesystem::path& corpus_path);

}  // namespace promptrestore
