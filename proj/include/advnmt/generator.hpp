#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "advnmt/checkpoint.hpp"
#include "advnmt/params.hpp"
#include "advnmt/rng.hpp"
#include "advnmt/tape.hpp"
#include "advnmt/vocab.hpp"

namespace advnmt {

inline double clamped_log(double p) { return std::log(std::max(p, Tape::kProbEps)); }

struct GeneratorConfig {
  int src_vocab = 0;
  int tgt_vocab = 0;
  int emb_dim = 32;
  int hidden_dim = 64;
  int max_len = 50;
  double init_range = 0.08;
  bool bidirectional = false;  // reserved; only the unidirectional encoder exists

  int pad = Vocabulary::kPad;
  int unk = Vocabulary::kUnk;
  int bos = Vocabulary::kBos;
  int eos = Vocabulary::kEos;

  void validate() const {
    if (src_vocab < 1 || tgt_vocab < 1) throw std::invalid_argument("generator config: vocab sizes must be positive");
    if (emb_dim < 1 || hidden_dim < 1) throw std::invalid_argument("generator config: dims must be positive");
    if (max_len < 1) throw std::invalid_argument("generator config: max_len must be >= 1");
    if (bidirectional) throw std::invalid_argument("generator config: bidirectional encoder is not implemented");
    if (bos < 0 || bos >= tgt_vocab)
      throw std::invalid_argument("generator config: BOS id must be a valid target id");
  }

  std::string serialize() const {
    std::ostringstream os;
    os << "kind=generator\n"
       << "src_vocab=" << src_vocab << "\n"
       << "tgt_vocab=" << tgt_vocab << "\n"
       << "emb_dim=" << emb_dim << "\n"
       << "hidden_dim=" << hidden_dim << "\n"
       << "max_len=" << max_len << "\n"
       << "init_range=" << init_range << "\n"
       << "pad=" << pad << "\nunk=" << unk << "\nbos=" << bos << "\neos=" << eos << "\n";
    return os.str();
  }

  static GeneratorConfig deserialize(const Checkpoint& c) {
    if (c.meta_value("kind") != "generator")
      throw std::runtime_error("checkpoint is not a generator checkpoint (kind=" + c.meta_value("kind") + ")");
    GeneratorConfig g;
    g.src_vocab = std::stoi(c.meta_value("src_vocab"));
    g.tgt_vocab = std::stoi(c.meta_value("tgt_vocab"));
    g.emb_dim = std::stoi(c.meta_value("emb_dim"));
    g.hidden_dim = std::stoi(c.meta_value("hidden_dim"));
    g.max_len = std::stoi(c.meta_value("max_len"));
    g.init_range = std::stod(c.meta_value("init_range"));
    g.pad = std::stoi(c.meta_value("pad"));
    g.unk = std::stoi(c.meta_value("unk"));
    g.bos = std::stoi(c.meta_value("bos"));
    g.eos = std::stoi(c.meta_value("eos"));
    return g;
  }
};

// Parameters bound onto one tape; reused across the steps of a sequence.
struct GeneratorBound {
  struct Gru {
    Var wz, uz, bz, wr, ur, br, wh, uh, bh;
  };
  Var src_emb, tgt_emb;
  Gru enc, dec;
  Var att_w1, att_w2, att_v;
  Var init_w;
  Var out_w, out_b;
};

// Encoder pass pinned to a tape: hidden states, cached attention projections,
// source mask, and the decoder's initial state.
struct EncoderContext {
  GeneratorBound bound;
  std::vector<int> tokens;
  std::vector<Var> h;
  std::vector<Var> att_proj;  // att_w1 * h_i
  std::vector<unsigned char> mask;
  Var r0;
};

struct AttendVars {
  Var context;
  Var alpha;
};

struct StepVars {
  Var dist;  // normalized distribution over the target vocabulary
  Var r_new;
  Var context;
  Var alpha;
};

struct SampleResult {
  std::vector<int> tokens;  // includes the trailing EOS when one was emitted
  double log_prob = 0.0;
};

inline std::vector<int> strip_eos(std::vector<int> tokens, int eos) {
  if (!tokens.empty() && tokens.back() == eos) tokens.pop_back();
  return tokens;
}

// The translation model: single-layer unidirectional GRU encoder, additive
// attention scorer v' tanh(W1 h + W2 r), single-layer GRU decoder consuming
// [emb(y_prev); context], readout over [r_t; c_t; emb(y_prev)].
class Generator {
 public:
  Generator(GeneratorConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng = stream_rng(seed, kStreamInitG);
    const int e = cfg_.emb_dim, h = cfg_.hidden_dim;
    const double r = cfg_.init_range;
    params_.add_uniform("emb.src", {cfg_.src_vocab, e}, r, rng);
    params_.add_uniform("emb.tgt", {cfg_.tgt_vocab, e}, r, rng);
    add_gru("enc", e, h, r, rng);
    add_gru("dec", e + h, h, r, rng);
    params_.add_uniform("att.w1", {h, h}, r, rng);
    params_.add_uniform("att.w2", {h, h}, r, rng);
    params_.add_uniform("att.v", {h}, r, rng);
    params_.add_uniform("init.w", {h, h}, r, rng);
    params_.add_uniform("out.w", {cfg_.tgt_vocab, 2 * h + e}, r, rng);
    params_.add_uniform("out.b", {cfg_.tgt_vocab}, r, rng);
  }

  const GeneratorConfig& config() const { return cfg_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }

  GeneratorBound bind(Tape& tape) const {
    auto& ps = const_cast<ParameterStore&>(params_);
    GeneratorBound b;
    b.src_emb = tape.param(ps, "emb.src");
    b.tgt_emb = tape.param(ps, "emb.tgt");
    b.enc = bind_gru(tape, ps, "enc");
    b.dec = bind_gru(tape, ps, "dec");
    b.att_w1 = tape.param(ps, "att.w1");
    b.att_w2 = tape.param(ps, "att.w2");
    b.att_v = tape.param(ps, "att.v");
    b.init_w = tape.param(ps, "init.w");
    b.out_w = tape.param(ps, "out.w");
    b.out_b = tape.param(ps, "out.b");
    return b;
  }

  // h_0 is the zero vector; h_i = GRU(h_{i-1}, emb(x_i)).
  EncoderContext encode(Tape& tape, const std::vector<int>& src) const {
    if (src.empty()) throw std::invalid_argument("encode: empty source sentence");
    EncoderContext ctx;
    ctx.bound = bind(tape);
    ctx.tokens = src;
    ctx.mask.assign(src.size(), 1);
    Var h_prev = tape.leaf(Tensor::zeros({cfg_.hidden_dim}));
    for (int id : src) {
      check_id(id, cfg_.src_vocab, "source");
      Var x = tape.lookup(ctx.bound.src_emb, id);
      h_prev = gru_step(tape, ctx.bound.enc, x, h_prev);
      ctx.h.push_back(h_prev);
      ctx.att_proj.push_back(tape.matmul(ctx.bound.att_w1, h_prev));
    }
    ctx.r0 = tape.tanh(tape.matmul(ctx.bound.init_w, ctx.h.back()));
    return ctx;
  }

  // alpha = masked softmax of v' tanh(W1 h_i + W2 r_prev); context = sum_i alpha_i h_i
  AttendVars attend(Tape& tape, const EncoderContext& enc, Var r_prev) const {
    if (enc.h.empty()) throw std::invalid_argument("attend: empty encoder output");
    Var w2r = tape.matmul(enc.bound.att_w2, r_prev);
    std::vector<Var> scores;
    scores.reserve(enc.h.size());
    for (std::size_t i = 0; i < enc.h.size(); ++i)
      scores.push_back(tape.dot(enc.bound.att_v, tape.tanh(tape.add(enc.att_proj[i], w2r))));
    Var alpha = tape.masked_softmax(tape.concat(scores), enc.mask);
    Var context = tape.weighted_sum(alpha, enc.h);
    return {context, alpha};
  }

  // One decoder step: attention with r_prev, GRU over [emb(y_prev); c_t],
  // softmax readout over [r_t; c_t; emb(y_prev)].
  StepVars step(Tape& tape, const EncoderContext& enc, Var r_prev, int y_prev) const {
    check_id(y_prev, cfg_.tgt_vocab, "target");
    Var emb_prev = tape.lookup(enc.bound.tgt_emb, y_prev);
    AttendVars att = attend(tape, enc, r_prev);
    Var x = tape.concat({emb_prev, att.context});
    Var r_new = gru_step(tape, enc.bound.dec, x, r_prev);
    Var readout = tape.concat({r_new, att.context, emb_prev});
    Var logits = tape.add(tape.matmul(enc.bound.out_w, readout), enc.bound.out_b);
    Var dist = tape.softmax(logits);
    return {dist, r_new, att.context, att.alpha};
  }

  // Teacher-forced sum_t log G(tokens[t] | tokens[<t], src). No delimiter
  // handling: callers pass exactly the steps to score.
  Var log_prob_tokens(Tape& tape, const std::vector<int>& src, const std::vector<int>& tokens) const {
    if (tokens.empty()) throw std::invalid_argument("log_prob_tokens: empty target");
    EncoderContext enc = encode(tape, src);
    Var r = enc.r0;
    int y_prev = cfg_.bos;
    Var total;
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      StepVars sv = step(tape, enc, r, y_prev);
      Var lp = tape.log(tape.pick(sv.dist, tokens[t]));
      total = t == 0 ? lp : tape.add(total, lp);
      r = sv.r_new;
      y_prev = tokens[t];
    }
    return total;
  }

  // Log-likelihood of a target that ends with EOS (teacher forcing).
  Var sequence_log_prob(Tape& tape, const std::vector<int>& src, const std::vector<int>& tgt_with_eos) const {
    if (tgt_with_eos.empty() || tgt_with_eos.back() != cfg_.eos)
      throw std::invalid_argument("sequence_log_prob: target must end with EOS");
    return log_prob_tokens(tape, src, tgt_with_eos);
  }

  // Ancestral sampling from the full model distribution until EOS or
  // max_len. Returns the sampled tokens and their accumulated log
  // probability; replaying them through log_prob_tokens reproduces it.
  SampleResult sample(const std::vector<int>& src, int max_len, Rng& rng) const {
    if (max_len < 1) throw std::invalid_argument("sample: max_len must be >= 1");
    Tape tape(false);
    EncoderContext enc = encode(tape, src);
    Var r = enc.r0;
    int y_prev = cfg_.bos;
    SampleResult res;
    for (int t = 0; t < max_len; ++t) {
      StepVars sv = step(tape, enc, r, y_prev);
      const Tensor& dist = tape.value(sv.dist);
      const int id = static_cast<int>(rng.categorical(dist.data));
      res.tokens.push_back(id);
      res.log_prob += clamped_log(dist.at(id));
      if (id == cfg_.eos) break;
      r = sv.r_new;
      y_prev = id;
    }
    return res;
  }

  void save(const std::string& path) const {
    Checkpoint c;
    c.meta = cfg_.serialize();
    for (const auto& [name, e] : params_.entries()) c.arrays.emplace(name, e.value);
    c.save(path);
  }

  static Generator load(const std::string& path) {
    Checkpoint c = Checkpoint::load(path);
    GeneratorConfig cfg = GeneratorConfig::deserialize(c);
    Generator g(cfg, 0);
    for (auto& [name, e] : g.params_.entries()) {
      const Tensor& stored = c.require(name);
      if (stored.shape != e.value.shape)
        throw std::runtime_error("checkpoint array '" + name + "' has shape " + shape_str(stored.shape) +
                                 ", expected " + shape_str(e.value.shape));
      e.value = stored;
    }
    return g;
  }

 private:
  void add_gru(const std::string& prefix, int in_dim, int h, double range, Rng& rng) {
    params_.add_uniform(prefix + ".wz", {h, in_dim}, range, rng);
    params_.add_uniform(prefix + ".uz", {h, h}, range, rng);
    params_.add_uniform(prefix + ".bz", {h}, range, rng);
    params_.add_uniform(prefix + ".wr", {h, in_dim}, range, rng);
    params_.add_uniform(prefix + ".ur", {h, h}, range, rng);
    params_.add_uniform(prefix + ".br", {h}, range, rng);
    params_.add_uniform(prefix + ".wh", {h, in_dim}, range, rng);
    params_.add_uniform(prefix + ".uh", {h, h}, range, rng);
    params_.add_uniform(prefix + ".bh", {h}, range, rng);
  }

  static GeneratorBound::Gru bind_gru(Tape& tape, ParameterStore& ps, const std::string& prefix) {
    GeneratorBound::Gru g;
    g.wz = tape.param(ps, prefix + ".wz");
    g.uz = tape.param(ps, prefix + ".uz");
    g.bz = tape.param(ps, prefix + ".bz");
    g.wr = tape.param(ps, prefix + ".wr");
    g.ur = tape.param(ps, prefix + ".ur");
    g.br = tape.param(ps, prefix + ".br");
    g.wh = tape.param(ps, prefix + ".wh");
    g.uh = tape.param(ps, prefix + ".uh");
    g.bh = tape.param(ps, prefix + ".bh");
    return g;
  }

  static Var gru_step(Tape& t, const GeneratorBound::Gru& g, Var x, Var h_prev) {
    Var z = t.sigmoid(t.add(t.add(t.matmul(g.wz, x), t.matmul(g.uz, h_prev)), g.bz));
    Var r = t.sigmoid(t.add(t.add(t.matmul(g.wr, x), t.matmul(g.ur, h_prev)), g.br));
    Var hh = t.tanh(t.add(t.add(t.matmul(g.wh, x), t.matmul(g.uh, t.mul(r, h_prev))), g.bh));
    return t.mix(z, hh, h_prev);  // (1-z)*hh + z*h_prev
  }

  static void check_id(int id, int vocab, const char* side) {
    if (id < 0 || id >= vocab)
      throw std::invalid_argument(std::string(side) + " token id " + std::to_string(id) +
                                  " out of range for vocabulary of size " + std::to_string(vocab));
  }

  GeneratorConfig cfg_;
  ParameterStore params_;
};

// Value-level stepwise decoding session over one source sentence: a
// non-recording tape shared by all steps so states stay addressable.
struct DecodeState {
  Var r;
  Tensor context;
  Tensor alpha;
};

class SentenceDecoder {
 public:
  SentenceDecoder(const Generator& g, const std::vector<int>& src)
      : tape_(false), gen_(g), enc_(g.encode(tape_, src)) {}

  DecodeState initial() const { return {enc_.r0, Tensor{}, Tensor{}}; }

  std::pair<Tensor, DecodeState> step(const DecodeState& state, int y_prev) {
    StepVars sv = gen_.step(tape_, enc_, state.r, y_prev);
    return {tape_.value(sv.dist), DecodeState{sv.r_new, tape_.value(sv.context), tape_.value(sv.alpha)}};
  }

  const EncoderContext& encoder() const { return enc_; }

 private:
  Tape tape_;
  const Generator& gen_;
  EncoderContext enc_;
};

}  // namespace advnmt
