#include "test_support.hpp"

#include <map>
#include <set>

#include "promptrestore/corpus.hpp"

using namespace promptrestore;

namespace {

size_t split_count(const InstructionCorpus& c, DegradationType t, Split s) { return c.cell(t, s).size(); }

}  // namespace

TEST_CASE("default corpus has 150 sentences, 50 per category") {
  const auto corpus = InstructionCorpus::generate(7, 50);
  CHECK(corpus.instructions().size() == 150);
  for (auto t : kAllDegradations) {
    CHECK(corpus.count(t) == 50);
    CHECK(split_count(corpus, t, Split::train) == 40);
    CHECK(split_count(corpus, t, Split::heldout) == 10);
  }
}

TEST_CASE("generation is a pure function of seed and size") {
  CHECK(InstructionCorpus::generate(7, 50).serialize() == InstructionCorpus::generate(7, 50).serialize());
  CHECK(InstructionCorpus::generate(7, 50).serialize() != InstructionCorpus::generate(8, 50).serialize());
}

TEST_CASE("minimum corpus holds out at least two per category") {
  const auto corpus = InstructionCorpus::generate(1, 10);
  CHECK(corpus.instructions().size() == 30);
  for (auto t : kAllDegradations) CHECK(split_count(corpus, t, Split::heldout) >= 2);
  CHECK_THROWS_AS(InstructionCorpus::generate(1, 9), InvalidArgument);
}

TEST_CASE("sentences are distinct and splits are disjoint") {
  const auto corpus = InstructionCorpus::generate(3, 60);
  std::set<std::string> texts;
  for (const auto& ins : corpus.instructions()) CHECK(texts.insert(ins.text).second);
  std::vector<Instruction> overlap = {{"remove the rain", DegradationType::rain, Split::train},
                                      {"remove the rain", DegradationType::rain, Split::heldout}};
  CHECK_THROWS_AS(InstructionCorpus{overlap}, InvalidArgument);
}

TEST_CASE("every sentence names its category") {
  const std::map<DegradationType, std::vector<std::string>> cues = {
      {DegradationType::noise, {"noise", "grain", "speckles", "noisy", "denoise", "despeckle"}},
      {DegradationType::rain, {"rain", "streaks", "raindrops", "rainy", "derain", "unrain"}},
      {DegradationType::haze, {"haze", "fog", "mist", "smog", "hazy", "dehaze", "defog"}}};
  const auto corpus = InstructionCorpus::generate(5, 50);
  for (const auto& ins : corpus.instructions()) {
    const auto words = pre_tokenize(ins.text);
    int hits = 0;
    for (const auto& [cat, list] : cues) {
      for (const auto& w : words) {
        if (std::find(list.begin(), list.end(), w) != list.end()) hits += cat == ins.category ? 1 : -100;
      }
    }
    CHECK_MESSAGE(hits > 0, ins.text);
  }
}

TEST_CASE("tokenize wraps words in [CLS] and [SEP]") {
  const auto corpus = InstructionCorpus::generate(7, 50);
  const auto seq = corpus.tokenize("remove the rain");
  REQUIRE(seq.length() == 5);
  CHECK(seq.ids[0] == special_tokens::kCls);
  CHECK(seq.ids[1] == corpus.token_id("remove"));
  CHECK(seq.ids[2] == corpus.token_id("the"));
  CHECK(seq.ids[3] == corpus.token_id("rain"));
  CHECK(seq.ids[4] == special_tokens::kSep);
  CHECK(seq.attention_mask == std::vector<int64_t>(5, 1));
  CHECK(corpus.tokenize("remove the rain").ids == seq.ids);
}

TEST_CASE("unknown words map to [UNK] and empty text is rejected") {
  const auto corpus = InstructionCorpus::generate(7, 50);
  const auto seq = corpus.tokenize("remove the zebra");
  CHECK(seq.ids[3] == special_tokens::kUnk);
  CHECK_THROWS_AS(corpus.tokenize("   "), InvalidArgument);
}

TEST_CASE("corpus sentences tokenize without loss") {
  const auto corpus = InstructionCorpus::generate(7, 50);
  for (const auto& ins : corpus.instructions()) {
    const auto seq = corpus.tokenize(ins.text);
    CHECK(seq.length() == pre_tokenize(ins.text).size() + 2);
    for (auto id : seq.ids) {
      CHECK(id >= 0);
      CHECK(id < corpus.vocab_size());
      CHECK(id != special_tokens::kUnk);
    }
    std::string joined;
    for (const auto& w : pre_tokenize(ins.text)) joined += (joined.empty() ? "" : " ") + w;
    CHECK(corpus.detokenize(seq.ids) == joined);
  }
}

TEST_CASE("pair tokenization marks segments") {
  const auto corpus = InstructionCorpus::generate(7, 50);
  const auto seq = corpus.tokenize_pair("remove the rain", "dehaze this image");
  const std::vector<int64_t> expected_segments{0, 0, 0, 0, 0, 1, 1, 1, 1};
  CHECK(seq.segments == expected_segments);
  CHECK(seq.ids[4] == special_tokens::kSep);
  CHECK(seq.ids.back() == special_tokens::kSep);
  CHECK(std::count(seq.ids.begin(), seq.ids.end(), special_tokens::kCls) == 1);
}

TEST_CASE("sampling respects the cell and is close to uniform") {
  const auto corpus = InstructionCorpus::generate(7, 50);
  Rng rng(1);
  std::map<std::string, int> counts;
  for (int i = 0; i < 10000; ++i) {
    const auto& ins = corpus.sample(DegradationType::rain, Split::train, rng);
    REQUIRE(ins.category == DegradationType::rain);
    REQUIRE(ins.split == Split::train);
    ++counts[ins.text];
  }
  CHECK(counts.size() == 40);
  for (const auto& [text, n] : counts) {
    CHECK(n >= 187);
    CHECK(n <= 313);
  }
}

TEST_CASE("single-instruction cell always yields that instruction; empty cell is not found") {
  std::vector<Instruction> list;
  for (int i = 0; i < 3; ++i) list.push_back({"remove noise " + std::to_string(i), DegradationType::noise, Split::train});
  list.push_back({"remove the haze", DegradationType::haze, Split::heldout});
  const InstructionCorpus corpus(list);
  Rng rng(0);
  for (int i = 0; i < 20; ++i) CHECK(corpus.sample(DegradationType::haze, Split::heldout, rng).text == "remove the haze");
  CHECK_THROWS_AS(corpus.sample(DegradationType::rain, Split::train, rng), NotFound);
}

TEST_CASE("serialization round trip preserves instructions and vocabulary") {
  const auto corpus = InstructionCorpus::generate(2, 20);
  const auto dir = std::filesystem::temp_directory_path() / "promptrestore_corpus_test";
  std::filesystem::create_directories(dir);
  corpus.save(dir / "corpus.tsv");
  const auto loaded = InstructionCorpus::load(dir / "corpus.tsv");
  CHECK((loaded.instructions() == corpus.instructions()));
  CHECK(loaded.vocabulary() == corpus.vocabulary());
  CHECK_THROWS_AS(InstructionCorpus::parse("noise\tbroken line\n"), InvalidArgument);
  std::filesystem::remove_all(dir);
}
