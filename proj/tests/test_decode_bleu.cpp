#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "advnmt/bleu.hpp"
#include "advnmt/decode.hpp"
#include "advnmt/generator.hpp"
#include "advnmt/rng.hpp"

using namespace advnmt;

namespace {

Generator tiny_generator(std::uint64_t seed, int vocab = 7, int emb = 3, int hidden = 4) {
  GeneratorConfig cfg;
  cfg.src_vocab = vocab;
  cfg.tgt_vocab = vocab;
  cfg.emb_dim = emb;
  cfg.hidden_dim = hidden;
  cfg.max_len = 8;
  return Generator(cfg, seed);
}

std::vector<std::string> words(std::initializer_list<const char*> ws) {
  std::vector<std::string> out;
  for (const char* w : ws) out.emplace_back(w);
  return out;
}

// every sampler outcome (EOS-terminated or max_len), scored exactly
struct Outcome {
  std::vector<int> tokens;
  double log_prob;
  bool finished;
};

void enumerate_rec(const Generator& g, SentenceDecoder& dec, const DecodeState& state, int y_prev,
                   std::vector<int>& prefix, double lp, int max_len, std::vector<Outcome>& out) {
  auto [dist, next] = dec.step(state, y_prev);
  for (int id = 0; id < g.config().tgt_vocab; ++id) {
    if (!decodable_id(id, g.config())) continue;
    const double step_lp = clamped_log(dist.at(id));
    if (id == g.config().eos) {
      out.push_back({prefix, lp + step_lp, true});
      continue;
    }
    prefix.push_back(id);
    if (static_cast<int>(prefix.size()) == max_len)
      out.push_back({prefix, lp + step_lp, false});
    else
      enumerate_rec(g, dec, next, id, prefix, lp + step_lp, max_len, out);
    prefix.pop_back();
  }
}

std::vector<Outcome> enumerate_decodable(const Generator& g, const std::vector<int>& src, int max_len) {
  SentenceDecoder dec(g, src);
  std::vector<Outcome> out;
  std::vector<int> prefix;
  enumerate_rec(g, dec, dec.initial(), g.config().bos, prefix, 0.0, max_len, out);
  return out;
}

}  // namespace

TEST_CASE("greedy decoding reproduces a point-mass model's modal sequence", "[decode]") {
  Generator g = tiny_generator(5);
  g.params().value("out.w").fill(0.0);
  g.params().value("out.b").fill(0.0);
  g.params().value("out.b").at(5) = 40.0;  // point mass on token 5 at every step
  DecodeResult res = greedy_decode(g, {4, 6}, 4);
  CHECK(res.tokens == std::vector<int>{5, 5, 5, 5});
  CHECK_FALSE(res.finished);

  g.params().value("out.b").at(5) = 0.0;
  g.params().value("out.b").at(Vocabulary::kEos) = 40.0;
  DecodeResult empty = greedy_decode(g, {4, 6}, 4);
  CHECK(empty.tokens.empty());
  CHECK(empty.finished);
}

TEST_CASE("greedy output contains neither PAD nor BOS and argmax ties break low", "[decode]") {
  for (std::uint64_t seed : {1ull, 2ull, 3ull, 4ull}) {
    Generator g = tiny_generator(seed);
    Rng rng(seed + 100);
    std::vector<int> src;
    for (int i = 0, n = rng.uniform_int(1, 6); i < n; ++i) src.push_back(rng.uniform_int(4, 6));
    DecodeResult res = greedy_decode(g, src, 8);
    for (int id : res.tokens) {
      CHECK(id != Vocabulary::kPad);
      CHECK(id != Vocabulary::kBos);
    }
  }
  // exact ties: uniform distribution picks the lowest decodable id
  Generator g = tiny_generator(9);
  g.params().value("out.w").fill(0.0);
  g.params().value("out.b").fill(0.0);
  DecodeResult res = greedy_decode(g, {4}, 1);
  REQUIRE(res.tokens.size() == 1);
  CHECK(res.tokens[0] == Vocabulary::kUnk);  // lowest id that is not PAD/BOS
}

TEST_CASE("beam width one is bit-identical to greedy decoding", "[decode]") {
  for (std::uint64_t seed = 1; seed <= 25; ++seed) {
    Generator g = tiny_generator(seed);
    Rng rng(seed * 31);
    std::vector<int> src;
    for (int i = 0, n = rng.uniform_int(1, 6); i < n; ++i) src.push_back(rng.uniform_int(4, 6));
    DecodeResult greedy = greedy_decode(g, src, 8);
    DecodeResult beam = beam_decode(g, src, 1, 8);
    CHECK(beam.tokens == greedy.tokens);
    CHECK(beam.log_prob == greedy.log_prob);
    CHECK(beam.finished == greedy.finished);
  }
}

TEST_CASE("wider beams never return a worse model score", "[decode]") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Generator g = tiny_generator(seed * 7);
    Rng rng(seed);
    std::vector<int> src;
    for (int i = 0, n = rng.uniform_int(1, 6); i < n; ++i) src.push_back(rng.uniform_int(4, 6));
    const double b1 = beam_decode(g, src, 1, 8).log_prob;
    const double b4 = beam_decode(g, src, 4, 8).log_prob;
    const double b8 = beam_decode(g, src, 8, 8).log_prob;
    CHECK(b4 >= b1);
    CHECK(b8 >= b4);
  }
}

TEST_CASE("a beam covering the whole space finds the exhaustive argmax", "[decode]") {
  for (std::uint64_t seed : {2ull, 12ull, 22ull}) {
    Generator g = tiny_generator(seed);  // 3 decodable non-EOS ids
    const std::vector<int> src = {4, 5, 6};
    const int max_len = 3;
    std::vector<Outcome> outcomes = enumerate_decodable(g, src, max_len);
    const Outcome* best = &outcomes[0];
    for (const Outcome& o : outcomes)
      if (o.log_prob > best->log_prob) best = &o;
    DecodeResult beam = beam_decode(g, src, 256, max_len);
    CHECK(beam.tokens == best->tokens);
    CHECK(beam.log_prob == Catch::Approx(best->log_prob).epsilon(1e-12));
  }
}

TEST_CASE("beam scores replay through the sequence scorer", "[decode]") {
  Generator g = tiny_generator(33);
  const std::vector<int> src = {5, 6, 4};
  DecodeResult res = beam_decode(g, src, 4, 8);
  std::vector<int> tokens = res.tokens;
  if (res.finished) tokens.push_back(g.config().eos);
  Tape tape(false);
  CHECK(tape.value(g.log_prob_tokens(tape, src, tokens)).at(0) == Catch::Approx(res.log_prob).margin(1e-10));
}

TEST_CASE("unk_replace copies the source token under the attention peak", "[decode]") {
  std::vector<std::string> hyp = {"le", "<unk>", "chat"};
  std::vector<Tensor> attention = {Tensor({3}, {0.8, 0.1, 0.1}), Tensor({3}, {0.05, 0.15, 0.8}),
                                   Tensor({3}, {0.2, 0.7, 0.1})};
  std::vector<std::string> src = {"the", "small", "cat"};
  std::vector<std::string> out = unk_replace(hyp, attention, src);
  CHECK(out == words({"le", "cat", "chat"}));

  // no UNK: unchanged; repeated application: unchanged (idempotent)
  CHECK(unk_replace(out, attention, src) == out);

  std::vector<Tensor> short_trace = {Tensor({3}, {1.0, 0.0, 0.0})};
  REQUIRE_THROWS_AS(unk_replace(hyp, short_trace, src), std::invalid_argument);
}

TEST_CASE("corpus BLEU is exactly 100 on an identical corpus", "[bleu]") {
  std::vector<std::vector<std::string>> corpus = {words({"the", "cat", "sat", "on", "the", "mat"}),
                                                  words({"a", "b", "c", "d"})};
  BleuReport rep = corpus_bleu(corpus, corpus);
  CHECK(rep.bleu == 100.0);
  CHECK(rep.brevity_penalty == 1.0);
  for (double p : rep.precisions) CHECK(p == 1.0);
}

TEST_CASE("disjoint vocabulary scores zero", "[bleu]") {
  BleuReport rep = corpus_bleu({words({"x", "y", "z", "w"})}, {words({"a", "b", "c", "d"})});
  CHECK(rep.bleu == 0.0);
  CHECK(rep.precisions[0] == 0.0);
}

TEST_CASE("clipped unigram precision counts each reference token once", "[bleu]") {
  BleuReport rep = corpus_bleu({words({"the", "the", "the"})}, {words({"the", "cat"})});
  CHECK(rep.precisions[0] == Catch::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(rep.bleu == 0.0);  // no bigram match
}

TEST_CASE("brevity penalty only punishes short hypotheses", "[bleu]") {
  BleuReport short_hyp = corpus_bleu({words({"a", "b"})}, {words({"a", "b", "c", "d"})});
  CHECK(short_hyp.brevity_penalty == Catch::Approx(std::exp(1.0 - 4.0 / 2.0)).epsilon(1e-12));
  BleuReport long_hyp = corpus_bleu({words({"a", "b", "c", "d", "e"})}, {words({"a", "b"})});
  CHECK(long_hyp.brevity_penalty == 1.0);
}

TEST_CASE("sentence BLEU is unsmoothed: a missing 4-gram match scores exactly zero", "[bleu]") {
  CHECK(sentence_bleu(words({"the", "cat"}), words({"the", "cat"})) == 0.0);  // shorter than any 4-gram
  CHECK(sentence_bleu(words({"a", "b", "c", "d"}), words({"a", "b", "x", "d"})) == 0.0);
  CHECK(sentence_bleu(words({"a", "b", "c", "d"}), words({"a", "b", "c", "d"})) == 100.0);
  // the smoothed diagnostic variant stays positive on partial matches
  CHECK(sentence_bleu(words({"the", "cat"}), words({"the", "cat"}), /*smooth=*/true) > 0.0);
}

TEST_CASE("a hypothesis closer to the reference scores higher", "[bleu]") {
  const auto ref = words({"we", "have", "to", "keep", "the", "door", "open", "for", "everyone", "here", "."});
  const auto close_hyp = words({"we", "have", "to", "keep", "the", "door", "open", "for", "all", "people", "."});
  const auto far_hyp = words({"we", "need", "that", "the", "door", "is", "kept", "open", "here", "."});
  CHECK(sentence_bleu(close_hyp, ref) > sentence_bleu(far_hyp, ref));
}

TEST_CASE("corpus BLEU is invariant to pair order", "[bleu]") {
  std::vector<std::vector<std::string>> hyps = {words({"a", "b", "c", "d"}), words({"x", "y", "z", "q", "r"}),
                                                words({"a", "a", "b"})};
  std::vector<std::vector<std::string>> refs = {words({"a", "b", "c", "e"}), words({"x", "y", "z", "q", "s"}),
                                                words({"a", "b", "b"})};
  BleuReport fwd = corpus_bleu(hyps, refs);
  std::vector<std::vector<std::string>> hyps_rev(hyps.rbegin(), hyps.rend());
  std::vector<std::vector<std::string>> refs_rev(refs.rbegin(), refs.rend());
  BleuReport rev = corpus_bleu(hyps_rev, refs_rev);
  CHECK(fwd.bleu == rev.bleu);
  CHECK(fwd.precisions == rev.precisions);
}

TEST_CASE("BLEU stays within bounds and self-comparison is perfect", "[bleu]") {
  Rng rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<std::string> hyp, ref;
    // sentences of 4+ tokens so an identical pair owns at least one 4-gram;
    // shorter identical pairs score 0 under the unsmoothed convention
    for (int i = 0, n = rng.uniform_int(4, 9); i < n; ++i) hyp.push_back("t" + std::to_string(rng.uniform_int(0, 4)));
    for (int i = 0, n = rng.uniform_int(4, 9); i < n; ++i) ref.push_back("t" + std::to_string(rng.uniform_int(0, 4)));
    const double b = sentence_bleu(hyp, ref);
    CHECK(b >= 0.0);
    CHECK(b <= 100.0);
    CHECK(sentence_bleu(hyp, hyp) == 100.0);
  }
}

TEST_CASE("BLEU input validation", "[bleu]") {
  REQUIRE_THROWS_AS(corpus_bleu({}, {}), std::invalid_argument);
  REQUIRE_THROWS_WITH(corpus_bleu({words({"a"})}, {}), Catch::Matchers::ContainsSubstring("1") &&
                                                           Catch::Matchers::ContainsSubstring("0"));
  REQUIRE_THROWS_AS(sentence_bleu({}, words({"a"})), std::invalid_argument);
}

TEST_CASE("matching is case-sensitive", "[bleu]") {
  CHECK(corpus_bleu({words({"The", "cat", "sat", "mat"})}, {words({"the", "cat", "sat", "mat"})}).precisions[0] ==
        Catch::Approx(0.75).epsilon(1e-12));
}
