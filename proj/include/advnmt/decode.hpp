#pragma once

#include <algorithm>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "advnmt/generator.hpp"
#include "advnmt/tensor.hpp"
#include "advnmt/vocab.hpp"

namespace advnmt {

// PAD and BOS are never emitted by deterministic decoding; UNK and EOS are
// ordinary candidates.
inline bool decodable_id(int id, const GeneratorConfig& cfg) { return id != cfg.pad && id != cfg.bos; }

struct DecodeResult {
  std::vector<int> tokens;          // body; trailing EOS stripped
  double log_prob = 0.0;            // includes the EOS step when finished
  bool finished = false;            // ended with EOS before max_len
  std::vector<Tensor> attention;    // one weight vector per body token
};

struct BeamHypothesis {
  std::vector<int> tokens;
  double log_prob = 0.0;
  DecodeState state;
  bool finished = false;
  std::vector<Tensor> attention;
};

// Argmax decoding; ties break to the lowest token id.
inline DecodeResult greedy_decode(const Generator& g, const std::vector<int>& src, int max_len) {
  if (max_len < 1) throw std::invalid_argument("greedy_decode: max_len must be >= 1");
  const GeneratorConfig& cfg = g.config();
  SentenceDecoder dec(g, src);
  DecodeState state = dec.initial();
  int y_prev = cfg.bos;
  DecodeResult res;
  for (int t = 0; t < max_len; ++t) {
    auto [dist, next] = dec.step(state, y_prev);
    int best = -1;
    for (int id = 0; id < cfg.tgt_vocab; ++id) {
      if (!decodable_id(id, cfg)) continue;
      if (best < 0 || dist.at(id) > dist.at(best)) best = id;
    }
    res.log_prob += clamped_log(dist.at(best));
    if (best == cfg.eos) {
      res.finished = true;
      break;
    }
    res.tokens.push_back(best);
    res.attention.push_back(next.alpha);
    state = next;
    y_prev = best;
  }
  return res;
}

// Breadth-limited best-first search over accumulated log-probabilities with
// no length normalization. Finished hypotheses compete with the surviving
// live ones by raw total log-probability. Candidate ordering is fully
// deterministic: score, then parent slot, then token id.
inline DecodeResult beam_decode(const Generator& g, const std::vector<int>& src, int beam_size, int max_len) {
  if (beam_size < 1) throw std::invalid_argument("beam_decode: beam_size must be >= 1");
  if (max_len < 1) throw std::invalid_argument("beam_decode: max_len must be >= 1");
  const GeneratorConfig& cfg = g.config();
  SentenceDecoder dec(g, src);

  std::vector<BeamHypothesis> live(1);
  live[0].state = dec.initial();

  bool have_finished = false;
  BeamHypothesis best_finished;

  struct Candidate {
    double score;
    std::size_t parent;
    int token;
  };

  for (int t = 0; t < max_len && !live.empty(); ++t) {
    std::vector<Candidate> cands;
    std::vector<DecodeState> next_states(live.size());
    cands.reserve(live.size() * static_cast<std::size_t>(cfg.tgt_vocab));
    for (std::size_t p = 0; p < live.size(); ++p) {
      const int y_prev = live[p].tokens.empty() ? cfg.bos : live[p].tokens.back();
      auto [dist, next] = dec.step(live[p].state, y_prev);
      next_states[p] = next;
      for (int id = 0; id < cfg.tgt_vocab; ++id) {
        if (!decodable_id(id, cfg)) continue;
        cands.push_back({live[p].log_prob + clamped_log(dist.at(id)), p, id});
      }
    }
    std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.parent != b.parent) return a.parent < b.parent;
      return a.token < b.token;
    });
    // EOS candidates compete for beam slots like any other token; only a
    // hypothesis that makes the top beam_size finalizes. This keeps beam 1
    // exactly equal to greedy decoding.
    std::vector<BeamHypothesis> next_live;
    std::size_t taken = 0;
    for (const Candidate& c : cands) {
      if (taken >= static_cast<std::size_t>(beam_size)) break;
      ++taken;
      if (c.token == cfg.eos) {
        if (!have_finished || c.score > best_finished.log_prob) {
          best_finished = live[c.parent];
          best_finished.log_prob = c.score;
          best_finished.finished = true;
          have_finished = true;
        }
        continue;
      }
      BeamHypothesis h = live[c.parent];
      h.log_prob = c.score;
      h.tokens.push_back(c.token);
      h.state = next_states[c.parent];
      h.attention.push_back(next_states[c.parent].alpha);
      next_live.push_back(std::move(h));
    }
    live = std::move(next_live);
    // log-probs only decrease with length, so a finished hypothesis at least
    // as good as every live prefix cannot be beaten
    if (have_finished && !live.empty() && best_finished.log_prob >= live.front().log_prob) {
      live.clear();
      break;
    }
  }

  const BeamHypothesis* winner = nullptr;
  if (have_finished) winner = &best_finished;
  if (!live.empty() && (!winner || live.front().log_prob > winner->log_prob)) winner = &live.front();
  if (!winner) throw std::runtime_error("beam_decode: no hypothesis produced");

  DecodeResult res;
  res.tokens = winner->tokens;
  res.log_prob = winner->log_prob;
  res.finished = winner->finished;
  res.attention = winner->attention;
  return res;
}

// Each UNK hypothesis token is replaced by the source token at the argmax
// attention position of its step; other tokens pass through. Idempotent.
inline std::vector<std::string> unk_replace(const std::vector<std::string>& hyp_tokens,
                                            const std::vector<Tensor>& attention,
                                            const std::vector<std::string>& src_tokens,
                                            const std::string& unk_token = "<unk>") {
  if (attention.size() != hyp_tokens.size())
    throw std::invalid_argument("unk_replace: attention trace length " + std::to_string(attention.size()) +
                                " does not match hypothesis length " + std::to_string(hyp_tokens.size()));
  std::vector<std::string> out;
  out.reserve(hyp_tokens.size());
  for (std::size_t t = 0; t < hyp_tokens.size(); ++t) {
    if (hyp_tokens[t] != unk_token) {
      out.push_back(hyp_tokens[t]);
      continue;
    }
    const Tensor& alpha = attention[t];
    if (static_cast<std::size_t>(alpha.numel()) != src_tokens.size())
      throw std::invalid_argument("unk_replace: attention width does not match source length");
    int best = 0;
    for (int i = 1; i < alpha.numel(); ++i)
      if (alpha.at(i) > alpha.at(best)) best = i;
    out.push_back(src_tokens[static_cast<std::size_t>(best)]);
  }
  return out;
}

}  // namespace advnmt
