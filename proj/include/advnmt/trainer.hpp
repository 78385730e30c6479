#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "advnmt/adversary.hpp"
#include "advnmt/bleu.hpp"
#include "advnmt/data.hpp"
#include "advnmt/decode.hpp"
#include "advnmt/generator.hpp"
#include "advnmt/rng.hpp"

namespace advnmt {

// Exponential moving average of observed rewards. The first observation
// seeds the average directly.
struct RewardBaseline {
  double value = 0.0;
  double decay = 0.95;
  bool initialized = false;

  void update(double reward) {
    if (!std::isfinite(reward)) throw std::invalid_argument("reward baseline: non-finite reward");
    if (!initialized) {
      value = reward;
      initialized = true;
    } else {
      value = decay * value + (1.0 - decay) * reward;
    }
  }
};

struct TrainingConfig {
  double lr_g = 0.02;
  double lr_d = 0.002;
  double clip_g = 1.0;
  double momentum_d = 0.9;
  int batch_g = 16;
  int batch_d = 32;
  double adv_fraction = 0.5;  // share of mini-batches trained adversarially
  double baseline_decay = 0.95;
  int lr_halve_epochs = 10;  // halve lr_g after this many epochs
  int beam_negatives = 4;    // beam width for D's negative examples
  int d_refresh_every = 1;   // joint-loop iterations between D updates; 0 disables
  int epochs = 10;
  int epoch_offset = 0;  // completed epochs when resuming; shifts numbering and the lr schedule
  int d_pretrain_epochs = 5;
  double heldout_fraction = 0.1;
  int eval_beam = 4;
  int max_len = 50;
  int checkpoint_every = 1;  // epochs; 0 disables
  std::uint64_t seed = 1;
  std::string out_dir;  // empty: keep everything in memory

  void validate() const {
    if (adv_fraction < 0.0 || adv_fraction > 1.0)
      throw std::invalid_argument("training config: adv_fraction must lie in [0,1]");
    if (lr_g <= 0.0 || lr_d <= 0.0) throw std::invalid_argument("training config: learning rates must be positive");
    if (clip_g <= 0.0) throw std::invalid_argument("training config: clip_g must be positive");
    if (batch_g < 1 || batch_d < 2) throw std::invalid_argument("training config: batch sizes too small");
    if (baseline_decay < 0.0 || baseline_decay >= 1.0)
      throw std::invalid_argument("training config: baseline_decay must lie in [0,1)");
  }
};

// One line per record; absent fields print as '-'. Field order:
// iter epoch kind mean_reward d_pos d_neg d_acc mle_loss dev_nll dev_bleu lr_g lr_d
struct MetricsRecord {
  long iter = 0;
  int epoch = 0;
  std::string kind;  // mle | adv | epoch | warn
  double mean_reward = nan_value();
  double d_pos = nan_value();
  double d_neg = nan_value();
  double d_acc = nan_value();
  double mle_loss = nan_value();
  double dev_nll = nan_value();
  double dev_bleu = nan_value();
  double lr_g = nan_value();
  double lr_d = nan_value();

  static double nan_value() { return std::numeric_limits<double>::quiet_NaN(); }
};

class MetricsLog {
 public:
  MetricsLog() = default;
  explicit MetricsLog(const std::string& path) {
    if (!path.empty()) {
      out_.open(path, std::ios::app);
      if (!out_) throw std::runtime_error("metrics log: cannot open " + path);
    }
  }

  void append(const MetricsRecord& r) {
    records_.push_back(r);
    if (out_.is_open()) {
      out_ << r.iter << ' ' << r.epoch << ' ' << r.kind << ' ' << field(r.mean_reward) << ' ' << field(r.d_pos) << ' '
           << field(r.d_neg) << ' ' << field(r.d_acc) << ' ' << field(r.mle_loss) << ' ' << field(r.dev_nll) << ' '
           << field(r.dev_bleu) << ' ' << field(r.lr_g) << ' ' << field(r.lr_d) << '\n';
      out_.flush();
    }
  }

  const std::vector<MetricsRecord>& records() const { return records_; }

 private:
  static std::string field(double v) {
    if (std::isnan(v)) return "-";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
  }

  std::vector<MetricsRecord> records_;
  std::ofstream out_;
};

inline std::vector<int> tgt_with_eos(const SentencePair& p, int eos) {
  std::vector<int> t = p.tgt;
  t.push_back(eos);
  return t;
}

// Per-token negative log-likelihood over a pair list, no gradients.
inline double eval_mle_nll(const Generator& g, const std::vector<SentencePair>& pairs) {
  if (pairs.empty()) throw std::invalid_argument("eval_mle_nll: empty pair list");
  double total_lp = 0.0;
  std::size_t total_tokens = 0;
  for (const SentencePair& p : pairs) {
    Tape tape(false);
    Var lp = g.sequence_log_prob(tape, p.src, tgt_with_eos(p, g.config().eos));
    total_lp += tape.value(lp).at(0);
    total_tokens += p.tgt.size() + 1;
  }
  return -total_lp / static_cast<double>(total_tokens);
}

// One clipped SGD step on the per-token NLL of a batch; returns that loss.
inline double mle_batch_step(Generator& g, const Batch& batch, double lr, double clip) {
  std::size_t total_tokens = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    std::size_t len = 0;
    for (unsigned char m : batch.tgt_mask[i]) len += m;
    total_tokens += len + 1;
  }
  double total_lp = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const SentencePair p = batch.pair(i);
    Tape tape;
    Var lp = g.sequence_log_prob(tape, p.src, tgt_with_eos(p, g.config().eos));
    total_lp += tape.value(lp).at(0);
    tape.backward(lp, -1.0 / static_cast<double>(total_tokens));
  }
  sgd_step(g.params(), lr, clip);
  return -total_lp / static_cast<double>(total_tokens);
}

inline double current_lr(double base, int epoch, int halve_epochs) {
  if (halve_epochs <= 0) return base;
  double lr = base;
  for (int e = halve_epochs; e < epoch; e += halve_epochs) lr *= 0.5;
  return lr;
}

inline ParameterStore snapshot_params(const ParameterStore& src) { return src; }

inline void restore_params(ParameterStore& dst, const ParameterStore& snap) {
  for (auto& [name, e] : dst.entries()) {
    e.value = snap.entries().at(name).value;
    e.grad.fill(0.0);
  }
}

struct MleTrainResult {
  double final_dev_nll = MetricsRecord::nan_value();
  bool aborted = false;
  int epochs_run = 0;
};

// MLE warm start: minimizes per-token NLL with clipped vanilla SGD. On a
// non-finite loss the parameters roll back to the last epoch boundary and
// training stops.
inline MleTrainResult pretrain_mle(Generator& g, const std::vector<SentencePair>& train,
                                   const std::vector<SentencePair>& dev, const TrainingConfig& cfg,
                                   MetricsLog* log = nullptr) {
  cfg.validate();
  if (train.empty()) throw std::invalid_argument("pretrain_mle: empty corpus");
  Rng shuffle = stream_rng(cfg.seed, kStreamShuffle);
  MleTrainResult res;
  ParameterStore good = snapshot_params(g.params());
  long iter = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double lr = current_lr(cfg.lr_g, epoch, cfg.lr_halve_epochs);
    bool failed = false;
    for (const Batch& b : make_batches(train, static_cast<std::size_t>(cfg.batch_g), shuffle)) {
      ++iter;
      double loss;
      try {
        loss = mle_batch_step(g, b, lr, cfg.clip_g);
      } catch (const std::runtime_error&) {
        failed = true;
        break;
      }
      if (!std::isfinite(loss)) {
        failed = true;
        break;
      }
      if (log) {
        MetricsRecord r;
        r.iter = iter;
        r.epoch = epoch;
        r.kind = "mle";
        r.mle_loss = loss;
        r.lr_g = lr;
        log->append(r);
      }
    }
    if (failed) {
      restore_params(g.params(), good);
      res.aborted = true;
      break;
    }
    res.final_dev_nll = dev.empty() ? MetricsRecord::nan_value() : eval_mle_nll(g, dev);
    res.epochs_run = epoch;
    good = snapshot_params(g.params());
    if (log) {
      MetricsRecord r;
      r.iter = iter;
      r.epoch = epoch;
      r.kind = "epoch";
      r.dev_nll = res.final_dev_nll;
      r.lr_g = lr;
      log->append(r);
    }
  }
  return res;
}

inline std::vector<std::vector<std::string>> ids_to_strings(const std::vector<std::vector<int>>& seqs) {
  std::vector<std::vector<std::string>> out;
  out.reserve(seqs.size());
  for (const auto& s : seqs) {
    std::vector<std::string> row;
    row.reserve(s.size());
    for (int id : s) row.push_back(std::to_string(id));
    out.push_back(std::move(row));
  }
  return out;
}

// Dev-set corpus BLEU of beam hypotheses against the references. Token
// identity is what matters, so ids stand in for surface strings.
inline double eval_bleu(const Generator& g, const std::vector<SentencePair>& pairs, int beam, int max_len) {
  if (pairs.empty()) throw std::invalid_argument("eval_bleu: empty pair list");
  std::vector<std::vector<int>> hyps, refs;
  for (const SentencePair& p : pairs) {
    hyps.push_back(beam_decode(g, p.src, beam, max_len).tokens);
    refs.push_back(p.tgt);
  }
  return corpus_bleu(ids_to_strings(hyps), ids_to_strings(refs)).bleu;
}

struct DPretrainResult {
  double heldout_accuracy = 0.0;
  double final_loss = MetricsRecord::nan_value();
  bool degenerate_negatives = false;  // beam output equals ground truth everywhere
};

inline double classification_accuracy(const std::vector<double>& pos_scores, const std::vector<double>& neg_scores) {
  std::size_t correct = 0;
  for (double s : pos_scores) correct += s > 0.5;
  for (double s : neg_scores) correct += !(s > 0.5);
  const std::size_t total = pos_scores.size() + neg_scores.size();
  return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

// Pretrains D on ground-truth positives against beam-search negatives from
// the frozen generator; reports held-out accuracy.
inline DPretrainResult pretrain_discriminator(Adversary& d, const Generator& g,
                                              const std::vector<SentencePair>& corpus, const TrainingConfig& cfg,
                                              MetricsLog* log = nullptr) {
  cfg.validate();
  if (corpus.empty()) throw std::invalid_argument("pretrain_discriminator: empty corpus");
  Rng held_rng = stream_rng(cfg.seed, kStreamHeldout);

  // negatives from the frozen generator, in input order
  std::vector<SentencePair> negatives;
  negatives.reserve(corpus.size());
  bool all_equal = true;
  for (const SentencePair& p : corpus) {
    DecodeResult hyp = beam_decode(g, p.src, cfg.beam_negatives, cfg.max_len);
    if (hyp.tokens.empty()) hyp.tokens.push_back(g.config().unk);  // D needs a nonempty target side
    if (hyp.tokens != p.tgt) all_equal = false;
    negatives.push_back({p.src, hyp.tokens});
  }
  DPretrainResult res;
  res.degenerate_negatives = all_equal;
  if (all_equal && log) {
    MetricsRecord r;
    r.kind = "warn";
    log->append(r);
  }

  std::vector<std::size_t> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  held_rng.shuffle(order);
  const std::size_t held = std::max<std::size_t>(1, static_cast<std::size_t>(
                                                        static_cast<double>(corpus.size()) * cfg.heldout_fraction));
  std::vector<std::size_t> held_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(held));
  std::vector<std::size_t> train_idx(order.begin() + static_cast<std::ptrdiff_t>(held), order.end());
  if (train_idx.empty()) throw std::invalid_argument("pretrain_discriminator: corpus too small for a held-out split");

  long iter = 0;
  double last_loss = MetricsRecord::nan_value();
  for (int epoch = 1; epoch <= cfg.d_pretrain_epochs; ++epoch) {
    held_rng.shuffle(train_idx);
    for (std::size_t start = 0; start < train_idx.size(); start += static_cast<std::size_t>(cfg.batch_d) / 2) {
      const std::size_t end = std::min(start + static_cast<std::size_t>(cfg.batch_d) / 2, train_idx.size());
      std::vector<SentencePair> pos, neg;
      for (std::size_t i = start; i < end; ++i) {
        pos.push_back(corpus[train_idx[i]]);
        neg.push_back(negatives[train_idx[i]]);
      }
      if (pos.size() + neg.size() < 2) continue;
      Tape tape;
      Var loss = d.adversary_loss(tape, pos, neg);
      last_loss = tape.value(loss).at(0);
      tape.backward(loss);
      nesterov_step(d.params(), cfg.lr_d, cfg.momentum_d);
      ++iter;
      if (log) {
        MetricsRecord r;
        r.iter = iter;
        r.epoch = epoch;
        r.kind = "d";
        r.mle_loss = last_loss;
        r.lr_d = cfg.lr_d;
        log->append(r);
      }
    }
  }
  res.final_loss = last_loss;

  std::vector<double> pos_scores, neg_scores;
  for (std::size_t i : held_idx) {
    pos_scores.push_back(d.discriminate(corpus[i].src, corpus[i].tgt));
    neg_scores.push_back(d.discriminate(negatives[i].src, negatives[i].tgt));
  }
  res.heldout_accuracy = classification_accuracy(pos_scores, neg_scores);
  return res;
}

// Reward for a sampled translation; both sides see the clamp so the reward
// stays finite.
using RewardFn = std::function<double(const std::vector<int>& src, const std::vector<int>& y_body)>;

inline RewardFn adversary_reward(const Adversary& d) {
  return [&d](const std::vector<int>& src, const std::vector<int>& body) {
    const double p = d.discriminate(src, body.empty() ? std::vector<int>{Vocabulary::kUnk} : body);
    return -std::log(1.0 - Tape::clamp_prob(p));
  };
}

struct ReinforceMetrics {
  double mean_reward = 0.0;
  double mean_advantage = 0.0;
  int samples = 0;
};

// Single-trajectory policy-gradient estimate: for each source, sample
// y' ~ G(.|x), take reward r = -log(1 - D(x, y')), advantage r - baseline,
// and accumulate -(advantage / N) * grad log G(y'|x) into the parameter
// gradients. Descending that accumulated gradient raises expected reward;
// with a zero baseline it is exactly the sampled estimate of the
// expected-log(1-D) gradient. The baseline updates after each advantage is
// taken, so it never depends on the sample it corrects.
inline ReinforceMetrics reinforce_accumulate(Generator& g, const RewardFn& reward,
                                             const std::vector<std::vector<int>>& sources, RewardBaseline& baseline,
                                             Rng& sample_rng, int max_len, bool use_baseline = true) {
  if (sources.empty()) throw std::invalid_argument("reinforce: empty batch");
  ReinforceMetrics m;
  const double n = static_cast<double>(sources.size());
  for (const std::vector<int>& src : sources) {
    SampleResult y = g.sample(src, max_len, sample_rng);
    const double r = reward(src, strip_eos(y.tokens, g.config().eos));
    const double advantage = r - (use_baseline ? baseline.value : 0.0);
    if (!std::isfinite(advantage)) throw std::runtime_error("reinforce: non-finite advantage");
    baseline.update(r);
    Tape tape;
    Var lp = g.log_prob_tokens(tape, src, y.tokens);
    tape.backward(lp, -advantage / n);
    m.mean_reward += r;
    m.mean_advantage += advantage;
    ++m.samples;
  }
  m.mean_reward /= n;
  m.mean_advantage /= n;
  return m;
}

inline ReinforceMetrics reinforce_step(Generator& g, const RewardFn& reward,
                                       const std::vector<std::vector<int>>& sources, RewardBaseline& baseline,
                                       Rng& sample_rng, double lr, double clip, int max_len) {
  ReinforceMetrics m = reinforce_accumulate(g, reward, sources, baseline, sample_rng, max_len);
  sgd_step(g.params(), lr, clip);
  return m;
}

struct AdvTrainResult {
  std::vector<double> dev_bleu;  // one entry per epoch
  std::vector<double> dev_nll;
  bool aborted = false;
  bool d_collapse_warned = false;
};

// The joint minimax loop. Each mini-batch trains G adversarially with
// probability adv_fraction and by MLE otherwise; every d_refresh_every
// iterations D takes one cross-entropy step on fresh beam-search negatives
// from the current G. lr_g halves on the configured epoch schedule.
// Generator updates never touch AdversaryParams and vice versa.
inline AdvTrainResult adversarial_train(Generator& g, Adversary& d, const std::vector<SentencePair>& train,
                                        const std::vector<SentencePair>& dev, const TrainingConfig& cfg,
                                        MetricsLog* log = nullptr) {
  cfg.validate();
  if (train.empty()) throw std::invalid_argument("adversarial_train: empty corpus");
  Rng shuffle = stream_rng(cfg.seed, kStreamShuffle);
  Rng mix = stream_rng(cfg.seed, kStreamMix);
  Rng sample_rng = stream_rng(cfg.seed, kStreamSample);
  Rng refresh_rng = stream_rng(cfg.seed, kStreamDRefresh);
  RewardBaseline baseline;
  baseline.decay = cfg.baseline_decay;
  RewardFn reward = adversary_reward(d);

  AdvTrainResult res;
  ParameterStore good_g = snapshot_params(g.params());
  ParameterStore good_d = snapshot_params(d.params());
  long iter = 0;
  for (int local_epoch = 1; local_epoch <= cfg.epochs; ++local_epoch) {
    const int epoch = cfg.epoch_offset + local_epoch;
    const double lr_g = current_lr(cfg.lr_g, epoch, cfg.lr_halve_epochs);
    bool failed = false;
    int refreshes = 0, collapsed_refreshes = 0;
    for (const Batch& b : make_batches(train, static_cast<std::size_t>(cfg.batch_g), shuffle)) {
      ++iter;
      MetricsRecord r;
      r.iter = iter;
      r.epoch = epoch;
      r.lr_g = lr_g;
      r.lr_d = cfg.lr_d;
      const bool adversarial = mix.uniform() < cfg.adv_fraction;
      try {
        if (adversarial) {
          std::vector<std::vector<int>> sources;
          for (std::size_t i = 0; i < b.size(); ++i) sources.push_back(b.pair(i).src);
          ReinforceMetrics rm = reinforce_step(g, reward, sources, baseline, sample_rng, lr_g, cfg.clip_g, cfg.max_len);
          r.kind = "adv";
          r.mean_reward = rm.mean_reward;
        } else {
          r.kind = "mle";
          r.mle_loss = mle_batch_step(g, b, lr_g, cfg.clip_g);
          if (!std::isfinite(r.mle_loss)) throw std::runtime_error("mle loss diverged");
        }
        if (cfg.d_refresh_every > 0 && iter % cfg.d_refresh_every == 0) {
          std::vector<SentencePair> pos, neg;
          const int take = cfg.batch_d / 2;
          for (int k = 0; k < take; ++k) {
            const SentencePair& p = train[static_cast<std::size_t>(
                refresh_rng.uniform_int(0, static_cast<int>(train.size()) - 1))];
            DecodeResult hyp = beam_decode(g, p.src, cfg.beam_negatives, cfg.max_len);
            if (hyp.tokens.empty()) hyp.tokens.push_back(g.config().unk);
            pos.push_back(p);
            neg.push_back({p.src, hyp.tokens});
          }
          std::vector<double> pos_scores = d.score_pairs(pos);
          std::vector<double> neg_scores = d.score_pairs(neg);
          double pos_mean = 0.0, neg_mean = 0.0;
          for (double s : pos_scores) pos_mean += s;
          for (double s : neg_scores) neg_mean += s;
          r.d_pos = pos_mean / static_cast<double>(pos_scores.size());
          r.d_neg = neg_mean / static_cast<double>(neg_scores.size());
          r.d_acc = classification_accuracy(pos_scores, neg_scores);
          ++refreshes;
          if (r.d_acc < 0.5) ++collapsed_refreshes;
          Tape tape;
          Var loss = d.adversary_loss(tape, pos, neg);
          tape.backward(loss);
          nesterov_step(d.params(), cfg.lr_d, cfg.momentum_d);
        }
      } catch (const std::runtime_error&) {
        failed = true;
        break;
      }
      if (log) log->append(r);
    }
    if (failed) {
      restore_params(g.params(), good_g);
      restore_params(d.params(), good_d);
      res.aborted = true;
      break;
    }
    if (refreshes > 0 && collapsed_refreshes == refreshes) {
      res.d_collapse_warned = true;
      if (log) {
        MetricsRecord warn;
        warn.iter = iter;
        warn.epoch = epoch;
        warn.kind = "warn";
        log->append(warn);
      }
    }
    const double dev_nll = dev.empty() ? MetricsRecord::nan_value() : eval_mle_nll(g, dev);
    const double dev_bleu = dev.empty() ? MetricsRecord::nan_value()
                                        : eval_bleu(g, dev, cfg.eval_beam, cfg.max_len);
    res.dev_nll.push_back(dev_nll);
    res.dev_bleu.push_back(dev_bleu);
    good_g = snapshot_params(g.params());
    good_d = snapshot_params(d.params());
    if (log) {
      MetricsRecord r;
      r.iter = iter;
      r.epoch = epoch;
      r.kind = "epoch";
      r.dev_nll = dev_nll;
      r.dev_bleu = dev_bleu;
      r.lr_g = lr_g;
      r.lr_d = cfg.lr_d;
      log->append(r);
    }
    if (!cfg.out_dir.empty() && cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0) {
      char name[64];
      std::snprintf(name, sizeof(name), "g_epoch%03d.ckpt", epoch);
      g.save((std::filesystem::path(cfg.out_dir) / name).string());
      std::snprintf(name, sizeof(name), "d_epoch%03d.ckpt", epoch);
      d.save((std::filesystem::path(cfg.out_dir) / name).string());
    }
  }
  return res;
}

}  // namespace advnmt
