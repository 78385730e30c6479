#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace advnmt {

// Corpus BLEU under the multi-bleu convention: modified n-gram precisions
// with reference clipping, geometric mean over n = 1..4, brevity penalty
// exp(1 - ref/hyp) when the hypothesis is shorter. Matching is exact and
// case-sensitive. Unsmoothed by default, so any zero precision zeroes the
// score.
struct BleuReport {
  double bleu = 0.0;  // percent
  std::array<double, 4> precisions{};
  double brevity_penalty = 0.0;
  std::size_t hyp_len = 0;
  std::size_t ref_len = 0;
};

namespace detail {

inline std::unordered_map<std::string, std::size_t> ngram_counts(const std::vector<std::string>& tokens, int n) {
  std::unordered_map<std::string, std::size_t> counts;
  if (static_cast<int>(tokens.size()) < n) return counts;
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= tokens.size(); ++i) {
    std::string key = tokens[i];
    for (int k = 1; k < n; ++k) {
      key += '\x1f';
      key += tokens[i + static_cast<std::size_t>(k)];
    }
    ++counts[key];
  }
  return counts;
}

}  // namespace detail

inline BleuReport corpus_bleu(const std::vector<std::vector<std::string>>& hyps,
                              const std::vector<std::vector<std::string>>& refs, int max_n = 4, bool smooth = false) {
  if (hyps.empty()) throw std::invalid_argument("corpus_bleu: empty corpus");
  if (hyps.size() != refs.size())
    throw std::invalid_argument("corpus_bleu: " + std::to_string(hyps.size()) + " hypotheses vs " +
                                std::to_string(refs.size()) + " references");
  if (max_n < 1 || max_n > 4) throw std::invalid_argument("corpus_bleu: max_n must be in 1..4");

  BleuReport rep;
  std::array<std::size_t, 4> matches{}, totals{};
  for (std::size_t s = 0; s < hyps.size(); ++s) {
    rep.hyp_len += hyps[s].size();
    rep.ref_len += refs[s].size();
    for (int n = 1; n <= max_n; ++n) {
      auto hyp_counts = detail::ngram_counts(hyps[s], n);
      auto ref_counts = detail::ngram_counts(refs[s], n);
      for (const auto& [gram, count] : hyp_counts) {
        totals[static_cast<std::size_t>(n - 1)] += count;
        auto it = ref_counts.find(gram);
        if (it != ref_counts.end())
          matches[static_cast<std::size_t>(n - 1)] += std::min(count, it->second);
      }
    }
  }

  double log_sum = 0.0;
  bool zero = false;
  for (int n = 1; n <= max_n; ++n) {
    const std::size_t i = static_cast<std::size_t>(n - 1);
    double m = static_cast<double>(matches[i]);
    double t = static_cast<double>(totals[i]);
    // diagnostic smoothing: add-one on every order above unigram
    if (smooth && n > 1) {
      m += 1.0;
      t += 1.0;
    }
    const double p = t > 0.0 ? m / t : 0.0;
    rep.precisions[i] = p;
    if (p <= 0.0)
      zero = true;
    else
      log_sum += std::log(p);
  }

  if (rep.hyp_len == 0) {
    rep.brevity_penalty = 0.0;
    rep.bleu = 0.0;
    return rep;
  }
  rep.brevity_penalty =
      rep.hyp_len < rep.ref_len
          ? std::exp(1.0 - static_cast<double>(rep.ref_len) / static_cast<double>(rep.hyp_len))
          : 1.0;
  rep.bleu = zero ? 0.0 : 100.0 * rep.brevity_penalty * std::exp(log_sum / static_cast<double>(max_n));
  return rep;
}

// Single-pair BLEU, unsmoothed by default so a missing 4-gram match scores
// exactly 0.00.
inline double sentence_bleu(const std::vector<std::string>& hyp, const std::vector<std::string>& ref,
                            bool smooth = false) {
  if (hyp.empty() || ref.empty()) throw std::invalid_argument("sentence_bleu: empty sentence");
  return corpus_bleu({hyp}, {ref}, 4, smooth).bleu;
}

}  // namespace advnmt
