#pragma once

#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "advnmt/rng.hpp"
#include "advnmt/vocab.hpp"

namespace advnmt {

// Integer-encoded bitext pair. Sequences carry no BOS/EOS; the model applies
// those delimiters itself.
struct SentencePair {
  std::vector<int> src;
  std::vector<int> tgt;
};

struct Batch {
  // padded to the max length in the batch with Vocabulary::kPad
  std::vector<std::vector<int>> src;
  std::vector<std::vector<int>> tgt;
  std::vector<std::vector<unsigned char>> src_mask;  // 1 on real tokens
  std::vector<std::vector<unsigned char>> tgt_mask;

  std::size_t size() const { return src.size(); }

  // strips padding back off a row
  SentencePair pair(std::size_t i) const {
    SentencePair p;
    for (std::size_t j = 0; j < src[i].size(); ++j)
      if (src_mask[i][j]) p.src.push_back(src[i][j]);
    for (std::size_t j = 0; j < tgt[i].size(); ++j)
      if (tgt_mask[i][j]) p.tgt.push_back(tgt[i][j]);
    return p;
  }
};

enum class SyntheticTask { kCopy, kReverse, kShift };

inline SyntheticTask parse_task(const std::string& s) {
  if (s == "copy") return SyntheticTask::kCopy;
  if (s == "reverse") return SyntheticTask::kReverse;
  if (s == "shift") return SyntheticTask::kShift;
  throw std::invalid_argument("unknown synthetic task '" + s + "' (expected copy, reverse or shift)");
}

// Alphabet of vocab_size symbols, ids kReserved..kReserved+vocab_size-1,
// rendered as w00, w01, ...
inline Vocabulary synthetic_vocab(int vocab_size) {
  if (vocab_size < 2) throw std::invalid_argument("synthetic vocab size must be >= 2");
  std::vector<std::string> tokens;
  for (int i = 0; i < vocab_size; ++i) {
    std::ostringstream os;
    os << "w" << (i < 10 ? "0" : "") << i;
    tokens.push_back(os.str());
  }
  return Vocabulary::from_tokens(tokens);
}

// Deterministic toy transduction corpus: copy, reverse, or +1 shift modulo
// the non-reserved alphabet.
inline std::vector<SentencePair> gen_synthetic(SyntheticTask task, int n, int vocab_size, int len_min, int len_max,
                                               std::uint64_t seed) {
  if (vocab_size < 2) throw std::invalid_argument("gen_synthetic: vocab_size must be >= 2");
  if (len_min < 1 || len_max < len_min)
    throw std::invalid_argument("gen_synthetic: invalid length range [" + std::to_string(len_min) + ", " +
                                std::to_string(len_max) + "]");
  Rng rng(seed);
  std::vector<SentencePair> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) {
    const int len = rng.uniform_int(len_min, len_max);
    SentencePair p;
    p.src.reserve(static_cast<std::size_t>(len));
    for (int i = 0; i < len; ++i) p.src.push_back(Vocabulary::kReserved + rng.uniform_int(0, vocab_size - 1));
    switch (task) {
      case SyntheticTask::kCopy:
        p.tgt = p.src;
        break;
      case SyntheticTask::kReverse:
        p.tgt.assign(p.src.rbegin(), p.src.rend());
        break;
      case SyntheticTask::kShift:
        for (int id : p.src) p.tgt.push_back(Vocabulary::kReserved + (id - Vocabulary::kReserved + 1) % vocab_size);
        break;
    }
    out.push_back(std::move(p));
  }
  return out;
}

// Shuffles and partitions into padded batches; every pair appears exactly
// once per epoch.
inline std::vector<Batch> make_batches(const std::vector<SentencePair>& pairs, std::size_t batch_size, Rng& shuffle_rng) {
  if (pairs.empty()) throw std::invalid_argument("make_batches: empty pair list");
  if (batch_size < 1) throw std::invalid_argument("make_batches: batch_size must be >= 1");
  std::vector<std::size_t> order(pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  shuffle_rng.shuffle(order);
  std::vector<Batch> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(start + batch_size, order.size());
    Batch b;
    std::size_t max_src = 0, max_tgt = 0;
    for (std::size_t i = start; i < end; ++i) {
      max_src = std::max(max_src, pairs[order[i]].src.size());
      max_tgt = std::max(max_tgt, pairs[order[i]].tgt.size());
    }
    for (std::size_t i = start; i < end; ++i) {
      const SentencePair& p = pairs[order[i]];
      std::vector<int> s = p.src, t = p.tgt;
      std::vector<unsigned char> sm(p.src.size(), 1), tm(p.tgt.size(), 1);
      s.resize(max_src, Vocabulary::kPad);
      t.resize(max_tgt, Vocabulary::kPad);
      sm.resize(max_src, 0);
      tm.resize(max_tgt, 0);
      b.src.push_back(std::move(s));
      b.tgt.push_back(std::move(t));
      b.src_mask.push_back(std::move(sm));
      b.tgt_mask.push_back(std::move(tm));
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

struct BitextLoadResult {
  std::vector<SentencePair> pairs;
  std::size_t dropped = 0;  // pairs outside [1, max_len] on either side
};

// Parallel plain-text corpus: UTF-8, one sentence per line, whitespace
// tokenized, aligned line by line.
inline BitextLoadResult load_bitext(const std::string& src_path, const std::string& tgt_path,
                                    const Vocabulary& src_vocab, const Vocabulary& tgt_vocab, std::size_t max_len) {
  std::ifstream src_in(src_path);
  if (!src_in) throw std::runtime_error("cannot open corpus file: " + src_path);
  std::ifstream tgt_in(tgt_path);
  if (!tgt_in) throw std::runtime_error("cannot open corpus file: " + tgt_path);
  BitextLoadResult res;
  std::string src_line, tgt_line;
  std::size_t line_no = 0;
  while (true) {
    const bool got_src = static_cast<bool>(std::getline(src_in, src_line));
    const bool got_tgt = static_cast<bool>(std::getline(tgt_in, tgt_line));
    if (!got_src && !got_tgt) break;
    if (got_src != got_tgt)
      throw std::runtime_error("bitext line counts differ between " + src_path + " and " + tgt_path);
    ++line_no;
    SentencePair p;
    p.src = src_vocab.encode(split_whitespace(src_line));
    p.tgt = tgt_vocab.encode(split_whitespace(tgt_line));
    if (p.src.empty() || p.tgt.empty() || p.src.size() > max_len || p.tgt.size() > max_len) {
      ++res.dropped;
      continue;
    }
    res.pairs.push_back(std::move(p));
  }
  if (res.pairs.empty()) throw std::runtime_error("no usable pairs in " + src_path + " / " + tgt_path);
  return res;
}

inline std::vector<std::string> read_token_stream(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open corpus file: " + path);
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line))
    for (std::string& t : split_whitespace(line)) tokens.push_back(std::move(t));
  return tokens;
}

inline void write_sentences(const std::string& path, const std::vector<std::vector<std::string>>& sentences) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  for (const auto& s : sentences) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i) out << ' ';
      out << s[i];
    }
    out << '\n';
  }
}

}  // namespace advnmt
