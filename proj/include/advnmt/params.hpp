#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>

#include "advnmt/rng.hpp"
#include "advnmt/tensor.hpp"

namespace advnmt {

// Named differentiable arrays plus their gradient (and, for momentum
// optimizers, velocity) slots. Iteration order is the lexicographic name
// order of std::map, which keeps norm sums and checkpoints deterministic.
class ParameterStore {
 public:
  struct Entry {
    Tensor value;
    Tensor grad;
    Tensor velocity;  // allocated on first momentum step
  };

  using Map = std::map<std::string, Entry>;

  Tensor& add(const std::string& name, Tensor value) {
    auto [it, inserted] = entries_.try_emplace(name);
    if (!inserted) throw std::invalid_argument("parameter already exists: " + name);
    it->second.grad = Tensor::zeros(value.shape);
    it->second.value = std::move(value);
    return it->second.value;
  }

  Tensor& add_uniform(const std::string& name, Shape shape, double range, Rng& rng) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (double& v : t.data) v = rng.uniform(-range, range);
    return add(name, std::move(t));
  }

  bool has(const std::string& name) const { return entries_.count(name) != 0; }

  Tensor& value(const std::string& name) { return entry(name).value; }
  const Tensor& value(const std::string& name) const { return entry(name).value; }
  Tensor& grad(const std::string& name) { return entry(name).grad; }
  const Tensor& grad(const std::string& name) const { return entry(name).grad; }

  Map& entries() { return entries_; }
  const Map& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  void zero_grads() {
    for (auto& [name, e] : entries_) e.grad.fill(0.0);
  }

  std::int64_t numel() const {
    std::int64_t n = 0;
    for (const auto& [name, e] : entries_) n += e.value.numel();
    return n;
  }

  // throws naming the first offending parameter
  void check_grads_finite() const {
    for (const auto& [name, e] : entries_) {
      if (!e.grad.all_finite())
        throw std::runtime_error("non-finite gradient in parameter '" + name + "'");
    }
  }

 private:
  Entry& entry(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw std::invalid_argument("unknown parameter: " + name);
    return it->second;
  }
  const Entry& entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw std::invalid_argument("unknown parameter: " + name);
    return it->second;
  }

  Map entries_;
};

inline double global_grad_norm(const ParameterStore& params) {
  double sq = 0.0;
  for (const auto& [name, e] : params.entries())
    for (double g : e.grad.data) sq += g * g;
  return std::sqrt(sq);
}

// Global-norm clipping followed by a vanilla gradient-descent update.
// Gradients are zeroed afterwards. clip may be +infinity.
inline void sgd_step(ParameterStore& params, double lr, double clip) {
  if (!(lr > 0.0)) throw std::invalid_argument("sgd_step: learning rate must be positive");
  if (!(clip > 0.0)) throw std::invalid_argument("sgd_step: clip must be positive");
  params.check_grads_finite();
  double scale = 1.0;
  if (std::isfinite(clip)) {
    const double norm = global_grad_norm(params);
    if (norm > clip) scale = clip / norm;
  }
  for (auto& [name, e] : params.entries()) {
    for (std::size_t i = 0; i < e.value.data.size(); ++i)
      e.value.data[i] -= lr * scale * e.grad.data[i];
    e.grad.fill(0.0);
  }
}

// Nesterov momentum: v <- mu*v + g, theta <- theta - lr*(g + mu*v).
// With mu = 0 this reduces to plain SGD. Gradients are zeroed afterwards.
inline void nesterov_step(ParameterStore& params, double lr, double momentum) {
  if (!(lr > 0.0)) throw std::invalid_argument("nesterov_step: learning rate must be positive");
  params.check_grads_finite();
  for (auto& [name, e] : params.entries()) {
    if (e.velocity.numel() == 0) e.velocity = Tensor::zeros(e.value.shape);
    for (std::size_t i = 0; i < e.value.data.size(); ++i) {
      const double g = e.grad.data[i];
      double& v = e.velocity.data[i];
      v = momentum * v + g;
      e.value.data[i] -= lr * (g + momentum * v);
    }
    e.grad.fill(0.0);
  }
}

}  // namespace advnmt
