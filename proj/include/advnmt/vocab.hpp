#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace advnmt {

// Token/id table with four fixed reserved ids. Immutable after construction.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kBos = 2;
  static constexpr int kEos = 3;
  static constexpr int kReserved = 4;

  Vocabulary() = default;

  // Keeps the size_limit most frequent tokens; frequency ties break
  // lexicographically. Everything else encodes to UNK.
  static Vocabulary build(const std::vector<std::string>& corpus_tokens, std::size_t size_limit) {
    if (corpus_tokens.empty()) throw std::invalid_argument("build_vocab: empty corpus");
    std::map<std::string, std::size_t> counts;
    for (const std::string& t : corpus_tokens) ++counts[t];
    std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    if (ranked.size() > size_limit) ranked.resize(size_limit);
    std::vector<std::string> kept;
    kept.reserve(ranked.size());
    for (auto& [tok, cnt] : ranked) kept.push_back(tok);
    return from_tokens(kept);
  }

  // tokens[i] gets id kReserved + i
  static Vocabulary from_tokens(const std::vector<std::string>& tokens) {
    Vocabulary v;
    v.id_to_token_ = {"<pad>", "<unk>", "<s>", "</s>"};
    for (const std::string& t : tokens) {
      if (t.empty()) throw std::invalid_argument("vocabulary: empty token");
      if (v.token_to_id_.count(t)) throw std::invalid_argument("vocabulary: duplicate token '" + t + "'");
      v.token_to_id_[t] = static_cast<int>(v.id_to_token_.size());
      v.id_to_token_.push_back(t);
    }
    return v;
  }

  int size() const { return static_cast<int>(id_to_token_.size()); }

  int encode_token(const std::string& tok) const {
    auto it = token_to_id_.find(tok);
    return it == token_to_id_.end() ? kUnk : it->second;
  }

  std::vector<int> encode(const std::vector<std::string>& tokens) const {
    std::vector<int> ids;
    ids.reserve(tokens.size());
    for (const std::string& t : tokens) ids.push_back(encode_token(t));
    return ids;
  }

  const std::string& token(int id) const {
    if (id < 0 || id >= size()) throw std::invalid_argument("vocabulary: id " + std::to_string(id) + " out of range");
    return id_to_token_[static_cast<std::size_t>(id)];
  }

  std::vector<std::string> decode(const std::vector<int>& ids) const {
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (int id : ids) out.push_back(token(id));
    return out;
  }

  bool contains(const std::string& tok) const { return token_to_id_.count(tok) != 0; }

  // one token per line; line number = id - kReserved
  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("vocabulary: cannot open for writing: " + path);
    for (int id = kReserved; id < size(); ++id) out << id_to_token_[static_cast<std::size_t>(id)] << "\n";
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("vocabulary: cannot open: " + path);
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      tokens.push_back(line);
    }
    return from_tokens(tokens);
  }

 private:
  std::unordered_map<std::string, int> token_to_id_;
  std::vector<std::string> id_to_token_;
};

inline std::vector<std::string> split_whitespace(const std::string& line) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != '\r') ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

}  // namespace advnmt
