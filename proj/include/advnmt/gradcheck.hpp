#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "advnmt/adversary.hpp"
#include "advnmt/generator.hpp"
#include "advnmt/params.hpp"
#include "advnmt/rng.hpp"
#include "advnmt/tape.hpp"
#include "advnmt/trainer.hpp"

namespace advnmt {

// Central-difference validation of the tape gradients. The differencing
// side only re-evaluates forward values, so it stays independent of the
// backward implementation it checks.
struct GradCheckGroup {
  std::string name;
  double max_rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckGroup> groups;
  double max_rel_error = 0.0;

  bool pass(double tol) const { return max_rel_error < tol; }
};

// Relative disagreement with an absolute floor: central differences on a
// double-precision loss carry ~1e-10 absolute noise, so coordinates whose
// gradient is below the floor are judged by absolute difference instead.
inline double rel_error(double analytic, double numeric) {
  const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-4});
  return std::fabs(analytic - numeric) / denom;
}

// loss_value must be a pure function of the store's current values.
// Analytic gradients are expected in the store's grad slots on entry;
// they are left untouched.
inline GradCheckReport finite_diff_check(ParameterStore& store, const std::function<double()>& loss_value,
                                         double step = 1e-5) {
  GradCheckReport report;
  for (auto& [name, e] : store.entries()) {
    GradCheckGroup group{name, 0.0};
    for (std::size_t i = 0; i < e.value.data.size(); ++i) {
      const double saved = e.value.data[i];
      e.value.data[i] = saved + step;
      const double up = loss_value();
      e.value.data[i] = saved - step;
      const double down = loss_value();
      e.value.data[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      group.max_rel_error = std::max(group.max_rel_error, rel_error(e.grad.data[i], numeric));
    }
    report.max_rel_error = std::max(report.max_rel_error, group.max_rel_error);
    report.groups.push_back(std::move(group));
  }
  return report;
}

namespace gradcheck {

// negative-control hook: pushes one analytic gradient off its true value so
// the comparison must fail
inline void corrupt_first_grad(ParameterStore& store, double amount) {
  if (amount == 0.0 || store.entries().empty()) return;
  store.entries().begin()->second.grad.data[0] += amount;
}

inline GeneratorConfig tiny_generator_config() {
  GeneratorConfig cfg;
  cfg.src_vocab = 8;
  cfg.tgt_vocab = 8;
  cfg.emb_dim = 5;
  cfg.hidden_dim = 6;
  cfg.max_len = 8;
  return cfg;
}

// (a) teacher-forced sequence log-likelihood
inline GradCheckReport check_sequence_log_prob(std::uint64_t seed, double corrupt = 0.0) {
  Generator g(tiny_generator_config(), seed);
  const std::vector<int> src = {4, 6, 5, 7};
  const std::vector<int> tgt = {5, 4, 7, Vocabulary::kEos};
  g.params().zero_grads();
  {
    Tape tape;
    Var lp = g.sequence_log_prob(tape, src, tgt);
    tape.backward(lp);
  }
  auto loss_value = [&]() {
    Tape tape(false);
    Var lp = g.sequence_log_prob(tape, src, tgt);
    return tape.value(lp).at(0);
  };
  corrupt_first_grad(g.params(), corrupt);
  GradCheckReport r = finite_diff_check(g.params(), loss_value);
  g.params().zero_grads();
  return r;
}

// (b) adversary cross-entropy on a tiny conv stack
inline GradCheckReport check_adversary_loss(std::uint64_t seed, double corrupt = 0.0) {
  GeneratorConfig gc = tiny_generator_config();
  Generator g(gc, seed);
  AdversaryConfig ac;
  ac.image_size = 6;
  ac.feature_maps = 3;
  ac.mlp_hidden = 4;
  Adversary d(ac, g, seed);
  const std::vector<SentencePair> pos = {{{4, 5, 6}, {6, 5, 4}}, {{5, 7}, {7, 5}}};
  const std::vector<SentencePair> neg = {{{4, 5, 6}, {4, 4, 4}}, {{5, 7}, {6, 6}}};
  d.params().zero_grads();
  {
    Tape tape;
    Var loss = d.adversary_loss(tape, pos, neg, /*update_running=*/false);
    tape.backward(loss);
  }
  auto loss_value = [&]() {
    Tape tape(false);
    Var loss = d.adversary_loss(tape, pos, neg, /*update_running=*/false);
    return tape.value(loss).at(0);
  };
  corrupt_first_grad(d.params(), corrupt);
  GradCheckReport r = finite_diff_check(d.params(), loss_value);
  d.params().zero_grads();
  return r;
}

// (c) the policy-gradient surrogate: -(advantage) * log G(y'|x) with the
// sampled trajectory and advantage held fixed
inline GradCheckReport check_reinforce_surrogate(std::uint64_t seed, double corrupt = 0.0) {
  Generator g(tiny_generator_config(), seed);
  Rng rng = stream_rng(seed, kStreamSample);
  const std::vector<int> src = {6, 4, 7};
  SampleResult y = g.sample(src, g.config().max_len, rng);
  const double advantage = 0.7;  // arbitrary fixed scale
  g.params().zero_grads();
  {
    Tape tape;
    Var lp = g.log_prob_tokens(tape, src, y.tokens);
    tape.backward(lp, -advantage);
  }
  auto loss_value = [&]() {
    Tape tape(false);
    Var lp = g.log_prob_tokens(tape, src, y.tokens);
    return -advantage * tape.value(lp).at(0);
  };
  corrupt_first_grad(g.params(), corrupt);
  GradCheckReport r = finite_diff_check(g.params(), loss_value);
  g.params().zero_grads();
  return r;
}

}  // namespace gradcheck

}  // namespace advnmt
