#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cstdio>
#include <map>

#include "advnmt/data.hpp"
#include "advnmt/rng.hpp"
#include "advnmt/vocab.hpp"

using namespace advnmt;

TEST_CASE("build_vocab keeps the most frequent tokens and maps the rest to UNK", "[data]") {
  Vocabulary v = Vocabulary::build({"a", "a", "b"}, 1);
  CHECK(v.size() == Vocabulary::kReserved + 1);
  CHECK(v.encode_token("a") == Vocabulary::kReserved);
  CHECK(v.encode_token("b") == Vocabulary::kUnk);
}

TEST_CASE("build_vocab breaks frequency ties lexicographically", "[data]") {
  Vocabulary v = Vocabulary::build({"zebra", "apple", "zebra", "apple", "mango"}, 2);
  CHECK(v.contains("apple"));
  CHECK(v.contains("zebra"));
  CHECK_FALSE(v.contains("mango"));
  // same count, "apple" sorts first
  CHECK(v.encode_token("apple") == Vocabulary::kReserved);
  CHECK(v.encode_token("zebra") == Vocabulary::kReserved + 1);
}

TEST_CASE("a generous limit leaves no token unknown and encode/decode round-trips", "[data]") {
  std::vector<std::string> corpus = {"the", "cat", "sat", "on", "the", "mat"};
  Vocabulary v = Vocabulary::build(corpus, 100);
  std::vector<std::string> sentence = {"the", "cat", "sat"};
  const std::vector<int> ids = v.encode(sentence);
  for (int id : ids) CHECK(id >= Vocabulary::kReserved);
  CHECK(v.decode(ids) == sentence);
}

TEST_CASE("build_vocab rejects an empty corpus", "[data]") {
  REQUIRE_THROWS_AS(Vocabulary::build({}, 10), std::invalid_argument);
}

TEST_CASE("vocabulary size never exceeds limit plus reserved ids", "[data]") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::string> corpus;
    const int distinct = rng.uniform_int(1, 30);
    const int total = rng.uniform_int(distinct, 200);
    for (int i = 0; i < total; ++i) corpus.push_back("t" + std::to_string(rng.uniform_int(0, distinct - 1)));
    const std::size_t limit = static_cast<std::size_t>(rng.uniform_int(1, 40));
    Vocabulary v = Vocabulary::build(corpus, limit);
    CHECK(static_cast<std::size_t>(v.size()) <= limit + Vocabulary::kReserved);
    for (const std::string& t : corpus) {
      const int id = v.encode_token(t);
      CHECK(id >= 0);
      CHECK(id < v.size());
    }
  }
}

TEST_CASE("vocabulary files round-trip with line number = id - reserved", "[data]") {
  Vocabulary v = Vocabulary::from_tokens({"alpha", "beta", "gamma"});
  const std::string path = "vocab_roundtrip_test.txt";
  v.save(path);
  Vocabulary back = Vocabulary::load(path);
  CHECK(back.size() == v.size());
  CHECK(back.encode_token("beta") == Vocabulary::kReserved + 1);
  std::remove(path.c_str());
}

TEST_CASE("gen_synthetic task definitions", "[data]") {
  auto copy = gen_synthetic(SyntheticTask::kCopy, 50, 10, 3, 8, 42);
  for (const SentencePair& p : copy) CHECK(p.tgt == p.src);

  auto reverse = gen_synthetic(SyntheticTask::kReverse, 50, 10, 3, 8, 42);
  for (const SentencePair& p : reverse) {
    std::vector<int> r(p.src.rbegin(), p.src.rend());
    CHECK(p.tgt == r);
  }

  auto shift = gen_synthetic(SyntheticTask::kShift, 50, 10, 3, 8, 42);
  for (const SentencePair& p : shift)
    for (std::size_t i = 0; i < p.src.size(); ++i) {
      const int sym = p.src[i] - Vocabulary::kReserved;
      CHECK(p.tgt[i] - Vocabulary::kReserved == (sym + 1) % 10);
    }
}

TEST_CASE("gen_synthetic is deterministic for a fixed seed and validates its range", "[data]") {
  auto a = gen_synthetic(SyntheticTask::kReverse, 100, 8, 2, 9, 7);
  auto b = gen_synthetic(SyntheticTask::kReverse, 100, 8, 2, 9, 7);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].src == b[i].src);
    CHECK(a[i].tgt == b[i].tgt);
  }
  for (const SentencePair& p : a) {
    CHECK(p.src.size() >= 2);
    CHECK(p.src.size() <= 9);
  }
  REQUIRE_THROWS_AS(gen_synthetic(SyntheticTask::kCopy, 5, 8, 6, 2, 1), std::invalid_argument);
  REQUIRE_THROWS_AS(gen_synthetic(SyntheticTask::kCopy, 5, 1, 2, 6, 1), std::invalid_argument);
}

TEST_CASE("make_batches partitions the corpus with consistent padding and masks", "[data]") {
  auto pairs = gen_synthetic(SyntheticTask::kCopy, 10, 6, 2, 7, 3);
  Rng rng(1);
  auto batches = make_batches(pairs, 4, rng);
  REQUIRE(batches.size() == 3);
  CHECK(batches[0].size() == 4);
  CHECK(batches[1].size() == 4);
  CHECK(batches[2].size() == 2);

  // multiset of pairs is preserved
  std::multiset<std::vector<int>> original, rebuilt;
  for (const auto& p : pairs) original.insert(p.src);
  for (const Batch& b : batches)
    for (std::size_t i = 0; i < b.size(); ++i) rebuilt.insert(b.pair(i).src);
  CHECK(original == rebuilt);

  for (const Batch& b : batches)
    for (std::size_t i = 0; i < b.size(); ++i) {
      REQUIRE(b.src[i].size() == b.src[0].size());
      REQUIRE(b.tgt[i].size() == b.tgt[0].size());
      for (std::size_t j = 0; j < b.src[i].size(); ++j) {
        if (!b.src_mask[i][j]) CHECK(b.src[i][j] == Vocabulary::kPad);
        if (b.src_mask[i][j]) CHECK(b.src[i][j] != Vocabulary::kPad);
      }
    }
}

TEST_CASE("batches of identical-length pairs have all-ones masks", "[data]") {
  auto pairs = gen_synthetic(SyntheticTask::kCopy, 8, 6, 5, 5, 9);
  Rng rng(2);
  for (const Batch& b : make_batches(pairs, 4, rng))
    for (const auto& mask : b.src_mask)
      for (unsigned char m : mask) CHECK(m == 1);
}

TEST_CASE("make_batches rejects empty input", "[data]") {
  Rng rng(1);
  std::vector<SentencePair> none;
  REQUIRE_THROWS_AS(make_batches(none, 4, rng), std::invalid_argument);
}

TEST_CASE("bitext loading aligns lines, filters by length and reports drops", "[data]") {
  const std::string src_path = "bitext_test.src";
  const std::string tgt_path = "bitext_test.tgt";
  write_sentences(src_path, {{"a", "b"}, {"c"}, {}, {"a", "a", "a", "a", "a"}});
  write_sentences(tgt_path, {{"b", "a"}, {"c"}, {"x"}, {"b", "b", "b", "b", "b"}});
  Vocabulary v = Vocabulary::from_tokens({"a", "b", "c"});
  BitextLoadResult res = load_bitext(src_path, tgt_path, v, v, 4);
  CHECK(res.pairs.size() == 2);   // empty source and over-length pair dropped
  CHECK(res.dropped == 2);
  CHECK(res.pairs[0].src == std::vector<int>{4, 5});

  const std::string short_path = "bitext_test_short.tgt";
  write_sentences(short_path, {{"b", "a"}});
  REQUIRE_THROWS_WITH(load_bitext(src_path, short_path, v, v, 4),
                      Catch::Matchers::ContainsSubstring("line counts differ"));
  std::remove(src_path.c_str());
  std::remove(tgt_path.c_str());
  std::remove(short_path.c_str());
}
