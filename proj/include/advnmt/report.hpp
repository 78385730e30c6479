#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "advnmt/adversary.hpp"
#include "advnmt/bleu.hpp"
#include "advnmt/decode.hpp"
#include "advnmt/generator.hpp"
#include "advnmt/vocab.hpp"

namespace advnmt {

// Case-study diagnostics: each pair gets a beam hypothesis scored by the
// adversary (eval mode) and by unsmoothed sentence BLEU.
struct CaseRow {
  std::vector<std::string> source;
  std::vector<std::string> reference;
  std::vector<std::string> hypothesis;
  double d_score = 0.0;
  double bleu = 0.0;
};

inline std::vector<CaseRow> case_report(const Generator& g, const Adversary& d,
                                        const std::vector<SentencePair>& pairs, const Vocabulary& src_vocab,
                                        const Vocabulary& tgt_vocab, int beam, int max_len) {
  std::vector<CaseRow> rows;
  rows.reserve(pairs.size());
  for (const SentencePair& p : pairs) {
    CaseRow row;
    row.source = src_vocab.decode(p.src);
    row.reference = tgt_vocab.decode(p.tgt);
    DecodeResult hyp = beam_decode(g, p.src, beam, max_len);
    row.hypothesis = tgt_vocab.decode(hyp.tokens);
    row.d_score = d.discriminate(p.src, hyp.tokens.empty() ? std::vector<int>{Vocabulary::kUnk} : hyp.tokens);
    row.bleu = row.hypothesis.empty() ? 0.0 : sentence_bleu(row.hypothesis, row.reference);
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

// tab-separated table with a header row
inline void write_case_report(std::ostream& out, const std::vector<CaseRow>& rows) {
  out << "source\treference\thypothesis\td_score\tsentence_bleu\n";
  char buf[64];
  for (const CaseRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%.4f\t%.2f", r.d_score, r.bleu);
    out << join_tokens(r.source) << '\t' << join_tokens(r.reference) << '\t' << join_tokens(r.hypothesis) << '\t'
        << buf << '\n';
  }
}

}  // namespace advnmt
