#pragma once

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "advnmt/adversary.hpp"
#include "advnmt/data.hpp"
#include "advnmt/generator.hpp"
#include "advnmt/trainer.hpp"

namespace advnmt {

// Flat key=value run configuration with a typed schema. Every run directory
// receives the resolved copy, so (config, seeds) pin outputs exactly.
struct RunConfig {
  // task: one of copy|reverse|shift (synthetic) or files (bitext paths)
  std::string task = "reverse";
  int vocab_size = 12;
  int train_pairs = 2000;
  int dev_pairs = 200;
  int len_min = 3;
  int len_max = 10;
  std::string train_src, train_tgt, dev_src, dev_tgt;
  int vocab_limit = 30000;
  int max_len = 50;

  // model
  int emb_dim = 32;
  int hidden_dim = 64;
  int disc_image_size = 32;
  int disc_feature_maps = 20;
  int disc_mlp_hidden = 20;
  bool disc_independent_embeddings = false;

  // training
  double lr_g = 0.02;
  double lr_d = 0.002;
  double clip_g = 1.0;
  double momentum_d = 0.9;
  int batch_g = 16;
  int batch_d = 32;
  double adv_fraction = 0.5;
  double baseline_decay = 0.95;
  int lr_halve_epochs = 10;
  int beam_negatives = 4;
  int d_refresh_every = 1;
  int epochs = 10;
  int d_pretrain_epochs = 5;
  double heldout_fraction = 0.1;
  int checkpoint_every = 1;

  // evaluation / run
  int eval_beam = 4;
  std::uint64_t seed = 1;
  std::string out_dir;

  struct Field {
    enum class Type { kInt, kDouble, kBool, kString, kU64 };
    const char* key;
    Type type;
    void* ptr;
  };

  std::vector<Field> schema() {
    using T = Field::Type;
    return {
        {"task", T::kString, &task},
        {"vocab_size", T::kInt, &vocab_size},
        {"train_pairs", T::kInt, &train_pairs},
        {"dev_pairs", T::kInt, &dev_pairs},
        {"len_min", T::kInt, &len_min},
        {"len_max", T::kInt, &len_max},
        {"train_src", T::kString, &train_src},
        {"train_tgt", T::kString, &train_tgt},
        {"dev_src", T::kString, &dev_src},
        {"dev_tgt", T::kString, &dev_tgt},
        {"vocab_limit", T::kInt, &vocab_limit},
        {"max_len", T::kInt, &max_len},
        {"emb_dim", T::kInt, &emb_dim},
        {"hidden_dim", T::kInt, &hidden_dim},
        {"disc_image_size", T::kInt, &disc_image_size},
        {"disc_feature_maps", T::kInt, &disc_feature_maps},
        {"disc_mlp_hidden", T::kInt, &disc_mlp_hidden},
        {"disc_independent_embeddings", T::kBool, &disc_independent_embeddings},
        {"lr_g", T::kDouble, &lr_g},
        {"lr_d", T::kDouble, &lr_d},
        {"clip_g", T::kDouble, &clip_g},
        {"momentum_d", T::kDouble, &momentum_d},
        {"batch_g", T::kInt, &batch_g},
        {"batch_d", T::kInt, &batch_d},
        {"adv_fraction", T::kDouble, &adv_fraction},
        {"baseline_decay", T::kDouble, &baseline_decay},
        {"lr_halve_epochs", T::kInt, &lr_halve_epochs},
        {"beam_negatives", T::kInt, &beam_negatives},
        {"d_refresh_every", T::kInt, &d_refresh_every},
        {"epochs", T::kInt, &epochs},
        {"d_pretrain_epochs", T::kInt, &d_pretrain_epochs},
        {"heldout_fraction", T::kDouble, &heldout_fraction},
        {"checkpoint_every", T::kInt, &checkpoint_every},
        {"eval_beam", T::kInt, &eval_beam},
        {"seed", T::kU64, &seed},
        {"out_dir", T::kString, &out_dir},
    };
  }

  void set(const std::string& key, const std::string& value) {
    for (Field& f : schema()) {
      if (key != f.key) continue;
      try {
        switch (f.type) {
          case Field::Type::kInt:
            *static_cast<int*>(f.ptr) = std::stoi(value);
            return;
          case Field::Type::kDouble:
            *static_cast<double*>(f.ptr) = std::stod(value);
            return;
          case Field::Type::kBool: {
            if (value == "true" || value == "1")
              *static_cast<bool*>(f.ptr) = true;
            else if (value == "false" || value == "0")
              *static_cast<bool*>(f.ptr) = false;
            else
              throw std::invalid_argument("boolean");
            return;
          }
          case Field::Type::kString:
            *static_cast<std::string*>(f.ptr) = value;
            return;
          case Field::Type::kU64:
            *static_cast<std::uint64_t*>(f.ptr) = std::stoull(value);
            return;
        }
      } catch (const std::exception&) {
        throw std::invalid_argument("config: cannot parse value '" + value + "' for key '" + key + "'");
      }
    }
    throw std::invalid_argument("config: unknown key '" + key + "'");
  }

  // "key=value" form used by command-line overrides
  void set_kv(const std::string& kv) {
    const std::size_t eq = kv.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: override '" + kv + "' is not of the form key=value");
    set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
  }

  void load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("config: cannot open " + path);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const std::size_t hash = line.find('#');
      if (hash != std::string::npos) line.resize(hash);
      const std::string t = trim(line);
      if (t.empty()) continue;
      const std::size_t eq = t.find('=');
      if (eq == std::string::npos)
        throw std::invalid_argument("config: " + path + ":" + std::to_string(line_no) + ": expected key = value");
      set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
    validate();
  }

  std::string serialize() {
    std::ostringstream os;
    for (Field& f : schema()) {
      os << f.key << " = ";
      switch (f.type) {
        case Field::Type::kInt:
          os << *static_cast<int*>(f.ptr);
          break;
        case Field::Type::kDouble: {
          char buf[64];
          std::snprintf(buf, sizeof(buf), "%.17g", *static_cast<double*>(f.ptr));
          os << buf;
          break;
        }
        case Field::Type::kBool:
          os << (*static_cast<bool*>(f.ptr) ? "true" : "false");
          break;
        case Field::Type::kString:
          os << *static_cast<std::string*>(f.ptr);
          break;
        case Field::Type::kU64:
          os << *static_cast<std::uint64_t*>(f.ptr);
          break;
      }
      os << "\n";
    }
    return os.str();
  }

  void save(const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("config: cannot write " + path);
    out << serialize();
  }

  void validate() const {
    if (task != "copy" && task != "reverse" && task != "shift" && task != "files")
      throw std::invalid_argument("config: task must be copy, reverse, shift or files (got '" + task + "')");
    if (task == "files" && (train_src.empty() || train_tgt.empty()))
      throw std::invalid_argument("config: files task requires train_src and train_tgt");
    if (task != "files" && (vocab_size < 2 || len_min < 1 || len_max < len_min))
      throw std::invalid_argument("config: invalid synthetic task parameters");
    if (emb_dim < 1 || hidden_dim < 1) throw std::invalid_argument("config: model dims must be positive");
    training().validate();
  }

  TrainingConfig training() const {
    TrainingConfig t;
    t.lr_g = lr_g;
    t.lr_d = lr_d;
    t.clip_g = clip_g;
    t.momentum_d = momentum_d;
    t.batch_g = batch_g;
    t.batch_d = batch_d;
    t.adv_fraction = adv_fraction;
    t.baseline_decay = baseline_decay;
    t.lr_halve_epochs = lr_halve_epochs;
    t.beam_negatives = beam_negatives;
    t.d_refresh_every = d_refresh_every;
    t.epochs = epochs;
    t.d_pretrain_epochs = d_pretrain_epochs;
    t.heldout_fraction = heldout_fraction;
    t.eval_beam = eval_beam;
    t.max_len = max_len;
    t.checkpoint_every = checkpoint_every;
    t.seed = seed;
    t.out_dir = out_dir;
    return t;
  }

  GeneratorConfig generator(int src_vocab, int tgt_vocab) const {
    GeneratorConfig g;
    g.src_vocab = src_vocab;
    g.tgt_vocab = tgt_vocab;
    g.emb_dim = emb_dim;
    g.hidden_dim = hidden_dim;
    g.max_len = max_len;
    return g;
  }

  AdversaryConfig adversary() const {
    AdversaryConfig a;
    a.image_size = disc_image_size;
    a.feature_maps = disc_feature_maps;
    a.mlp_hidden = disc_mlp_hidden;
    a.independent_embeddings = disc_independent_embeddings;
    return a;
  }

  static std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r')) ++b;
    while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r')) --e;
    return s.substr(b, e - b);
  }
};

struct ResolvedCorpus {
  std::vector<SentencePair> train;
  std::vector<SentencePair> dev;
  Vocabulary src_vocab;
  Vocabulary tgt_vocab;
};

// Materializes the task named by the config: deterministic synthetic corpora
// or bitext files with vocabularies built from the training side.
inline ResolvedCorpus resolve_corpus(const RunConfig& cfg) {
  ResolvedCorpus out;
  if (cfg.task == "files") {
    out.src_vocab = Vocabulary::build(read_token_stream(cfg.train_src), static_cast<std::size_t>(cfg.vocab_limit));
    out.tgt_vocab = Vocabulary::build(read_token_stream(cfg.train_tgt), static_cast<std::size_t>(cfg.vocab_limit));
    out.train = load_bitext(cfg.train_src, cfg.train_tgt, out.src_vocab, out.tgt_vocab,
                            static_cast<std::size_t>(cfg.max_len))
                    .pairs;
    if (!cfg.dev_src.empty())
      out.dev = load_bitext(cfg.dev_src, cfg.dev_tgt, out.src_vocab, out.tgt_vocab,
                            static_cast<std::size_t>(cfg.max_len))
                    .pairs;
    return out;
  }
  const SyntheticTask task = parse_task(cfg.task);
  out.src_vocab = synthetic_vocab(cfg.vocab_size);
  out.tgt_vocab = out.src_vocab;
  out.train = gen_synthetic(task, cfg.train_pairs, cfg.vocab_size, cfg.len_min, cfg.len_max,
                            splitmix64(cfg.seed ^ 0xA5A5A5A5ull));
  out.dev = gen_synthetic(task, cfg.dev_pairs, cfg.vocab_size, cfg.len_min, cfg.len_max,
                          splitmix64(cfg.seed ^ 0x5A5A5A5Aull));
  return out;
}

}  // namespace advnmt
