#include "promptrestore/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

namespace promptrestore {

std::string_view to_string(Split split) { return split == Split::train ? "train" : "heldout"; }

Split parse_split(std::string_view name) {
  if (name == "train") return Split::train;
  if (name == "heldout") return Split::heldout;
  throw InvalidArgument("unknown split '" + std::string(name) + "'");
}

std::vector<std::string> pre_tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) tokens.push_back(std::move(current));
    current.clear();
  };
  for (char raw : text) {
    const auto ch = static_cast<unsigned char>(raw);
    if (std::isspace(ch)) {
      flush();
    } else if (std::ispunct(ch) && ch != '\'' && ch != '-') {
      flush();
      tokens.emplace_back(1, static_cast<char>(ch));
    } else {
      current.push_back(static_cast<char>(std::tolower(ch)));
    }
  }
  flush();
  return tokens;
}

namespace {

struct CategoryLexicon {
  DegradationType category;
  std::vector<std::string> nouns;
  std::vector<std::string> task_verbs;  // single-word verbs naming the task
};

const std::vector<std::string>& shared_verbs() {
  static const std::vector<std::string> verbs = {
      "remove", "eliminate", "clear", "get rid of", "erase", "clean up", "take away", "wipe out"};
  return verbs;
}

const std::vector<std::string>& objects() {
  static const std::vector<std::string> objs = {"this picture", "this image", "this photo",
                                                "the photograph"};
  return objs;
}

const std::vector<CategoryLexicon>& lexicons() {
  static const std::vector<CategoryLexicon> lex = {
      {DegradationType::noise,
       {"the noise", "the grain", "the noisy speckles", "the sensor noise", "the random noise"},
       {"denoise", "despeckle"}},
      {DegradationType::rain,
       {"the rain", "the rain streaks", "the raindrops", "the falling rain", "the rainy lines"},
       {"derain", "unrain"}},
      {DegradationType::haze,
       {"the haze", "the fog", "the mist", "the smog", "the hazy veil"},
       {"dehaze", "defog"}},
  };
  return lex;
}

// Every phrasing the expander knows for one category, in a fixed order.
std::vector<std::string> expand_templates(const CategoryLexicon& lex) {
  std::vector<std::string> out;
  for (const auto& verb : shared_verbs()) {
    for (const auto& noun : lex.nouns) {
      for (const auto& obj : objects()) {
        out.push_back(verb + " " + noun + " from " + obj);
        out.push_back("please " + verb + " " + noun + " in " + obj);
        out.push_back("can you " + verb + " " + noun + " from " + obj + " ?");
        // clause reorderings
        out.push_back("in " + obj + " , " + verb + " " + noun);
        out.push_back(obj + " contains " + noun + " , " + verb + " it");
      }
    }
  }
  for (const auto& verb : lex.task_verbs) {
    for (const auto& obj : objects()) {
      out.push_back(verb + " " + obj);
      out.push_back("please " + verb + " " + obj);
    }
  }
  return out;
}

}  // namespace

InstructionCorpus::InstructionCorpus(std::vector<Instruction> instructions)
    : instructions_(std::move(instructions)) {
  std::set<std::string> words;
  for (const auto& ins : instructions_) {
    for (auto& tok : pre_tokenize(ins.text)) words.insert(std::move(tok));
  }
  for (auto name : special_tokens::kNames) vocabulary_.emplace_back(name);
  vocabulary_.insert(vocabulary_.end(), words.begin(), words.end());
  index_vocabulary();
  validate();
}

InstructionCorpus::InstructionCorpus(std::vector<Instruction> instructions,
                                     std::vector<std::string> vocabulary)
    : instructions_(std::move(instructions)), vocabulary_(std::move(vocabulary)) {
  for (int64_t i = 0; i < special_tokens::kCount; ++i) {
    if (i >= vocab_size() || vocabulary_[i] != special_tokens::kNames[i]) {
      throw InvalidArgument("vocabulary must start with the special tokens in canonical order");
    }
  }
  index_vocabulary();
  validate();
}

void InstructionCorpus::index_vocabulary() {
  token_ids_.clear();
  for (int64_t i = 0; i < vocab_size(); ++i) {
    if (!token_ids_.emplace(vocabulary_[i], i).second) {
      throw InvalidArgument("duplicate vocabulary token '" + vocabulary_[i] + "'");
    }
  }
}

void InstructionCorpus::validate() const {
  std::set<std::string> train, heldout;
  for (const auto& ins : instructions_) {
    if (ins.text.empty() || pre_tokenize(ins.text).empty()) {
      throw InvalidArgument("instruction text must be non-empty");
    }
    (ins.split == Split::train ? train : heldout).insert(ins.text);
  }
  for (const auto& text : heldout) {
    if (train.contains(text)) throw InvalidArgument("sentence in both splits: " + text);
  }
}

InstructionCorpus InstructionCorpus::generate(uint64_t seed, int per_category) {
  if (per_category < kMinPerCategory) {
    throw InvalidArgument("per_category must be at least " + std::to_string(kMinPerCategory));
  }
  Rng rng(seed);
  std::vector<Instruction> out;
  for (const auto& lex : lexicons()) {
    auto pool = expand_templates(lex);
    if (static_cast<size_t>(per_category) > pool.size()) {
      throw InvalidArgument("per_category exceeds the " + std::to_string(pool.size()) +
                            " distinct templates available");
    }
    portable_shuffle(pool, rng);
    const int heldout = std::max(1, static_cast<int>(per_category * 0.2 + 0.5));
    for (int i = 0; i < per_category; ++i) {
      out.push_back({pool[i], lex.category, i < per_category - heldout ? Split::train : Split::heldout});
    }
  }
  return InstructionCorpus(std::move(out));
}

std::vector<const Instruction*> InstructionCorpus::cell(DegradationType category, Split split) const {
  std::vector<const Instruction*> out;
  for (const auto& ins : instructions_) {
    if (ins.category == category && ins.split == split) out.push_back(&ins);
  }
  return out;
}

size_t InstructionCorpus::count(DegradationType category) const {
  return std::count_if(instructions_.begin(), instructions_.end(),
                       [&](const Instruction& i) { return i.category == category; });
}

const Instruction& InstructionCorpus::sample(DegradationType category, Split split, Rng& rng) const {
  auto members = cell(category, split);
  if (members.empty()) {
    throw NotFound("no " + std::string(to_string(split)) + " instruction for category " +
                   std::string(to_string(category)));
  }
  return *members[uniform_index(rng, members.size())];
}

int64_t InstructionCorpus::token_id(std::string_view token) const {
  auto it = token_ids_.find(std::string(token));
  return it == token_ids_.end() ? special_tokens::kUnk : it->second;
}

const std::string& InstructionCorpus::token(int64_t id) const {
  if (id < 0 || id >= vocab_size()) throw InvalidArgument("token id out of range");
  return vocabulary_[id];
}

TokenSequence InstructionCorpus::tokenize(std::string_view text) const {
  if (pre_tokenize(text).empty()) throw InvalidArgument("cannot tokenize empty text");
  TokenSequence seq;
  seq.ids.push_back(special_tokens::kCls);
  for (const auto& word : pre_tokenize(text)) seq.ids.push_back(token_id(word));
  seq.ids.push_back(special_tokens::kSep);
  seq.attention_mask.assign(seq.ids.size(), 1);
  seq.segments.assign(seq.ids.size(), 0);
  return seq;
}

TokenSequence InstructionCorpus::tokenize_pair(std::string_view first, std::string_view second) const {
  TokenSequence seq = tokenize(first);
  const TokenSequence tail = tokenize(second);
  // drop the second [CLS]
  seq.ids.insert(seq.ids.end(), tail.ids.begin() + 1, tail.ids.end());
  seq.attention_mask.assign(seq.ids.size(), 1);
  seq.segments.resize(seq.ids.size(), 1);
  return seq;
}

std::string InstructionCorpus::detokenize(const std::vector<int64_t>& ids) const {
  std::string out;
  for (int64_t id : ids) {
    if (is_special_token(id) && id != special_tokens::kUnk) continue;
    if (!out.empty()) out += ' ';
    out += token(id);
  }
  return out;
}

std::string InstructionCorpus::serialize() const {
  std::string out;
  for (const auto& ins : instructions_) {
    out += to_string(ins.category);
    out += '\t';
    out += to_string(ins.split);
    out += '\t';
    out += ins.text;
    out += '\n';
  }
  return out;
}

std::string InstructionCorpus::serialize_vocabulary() const {
  std::string out;
  for (const auto& tok : vocabulary_) out += tok + '\n';
  return out;
}

std::filesystem::path vocabulary_path(const std::filesystem::path& corpus_path) {
  return std::filesystem::path(corpus_path.string() + ".vocab");
}

void InstructionCorpus::save(const std::filesystem::path& path) const {
  std::ofstream(path, std::ios::binary) << serialize();
  std::ofstream(vocabulary_path(path), std::ios::binary) << serialize_vocabulary();
}

InstructionCorpus InstructionCorpus::parse(std::string_view text) {
  std::vector<Instruction> out;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto t1 = line.find('\t');
    const auto t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
    if (t2 == std::string::npos) {
      throw InvalidArgument("corpus line " + std::to_string(lineno) + ": expected 3 tab-separated fields");
    }
    out.push_back({line.substr(t2 + 1), parse_degradation(line.substr(0, t1)),
                   parse_split(line.substr(t1 + 1, t2 - t1 - 1))});
  }
  return InstructionCorpus(std::move(out));
}

InstructionCorpus InstructionCorpus::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFound("cannot open corpus " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  InstructionCorpus parsed = parse(buffer.str());

  std::ifstream vocab_in(vocabulary_path(path));
  if (!vocab_in) return parsed;
  std::vector<std::string> vocab;
  std::string line;
  while (std::getline(vocab_in, line)) {
    if (!line.empty()) vocab.push_back(line);
  }
  return InstructionCorpus(parsed.instructions_, std::move(vocab));
}

}  // namespace promptrestore
