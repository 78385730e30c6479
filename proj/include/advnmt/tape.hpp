#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "advnmt/params.hpp"
#include "advnmt/tensor.hpp"

namespace advnmt {

// Handle to a node on a Tape.
struct Var {
  int idx = -1;
  bool valid() const { return idx >= 0; }
};

// Reverse-mode autodiff tape. Operations compute values eagerly and, while
// recording, push a backward closure; backward() replays the closures in
// reverse creation order, which is a reverse topological order by
// construction. Gradients of shared subexpressions accumulate by summation.
//
// A tape constructed with recording=false evaluates the same numeric code
// with no backward bookkeeping; inference paths use that mode so training
// and decoding share one forward implementation.
class Tape {
 public:
  static constexpr double kProbEps = 1e-7;  // probability clamp before any log
  static constexpr double kBnEps = 1e-5;

  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }

  Var leaf(Tensor v) { return push(std::move(v), false, nullptr); }

  // Binds a named parameter: the leaf sees the current value and, after
  // backward, its gradient is added into the store's gradient slot.
  Var param(ParameterStore& store, const std::string& name) {
    Var v = push(Tensor(store.value(name)), recording_, nullptr);
    if (recording_) bindings_.push_back({&store, name, v.idx});
    return v;
  }

  const Tensor& value(Var v) const { return node(v).value; }

  const Tensor& grad(Var v) const {
    const Node& n = node(v);
    if (!n.has_grad) throw std::runtime_error("tape: gradient not populated for this node");
    return n.grad;
  }

  // Seeds d(root)/d(root) = seed and propagates. root must be scalar.
  void backward(Var root, double seed = 1.0) {
    if (!recording_) throw std::runtime_error("tape: backward on a non-recording tape");
    if (backward_done_) throw std::runtime_error("tape: backward already ran");
    const Node& r = node(root);
    if (r.value.numel() != 1)
      throw std::invalid_argument("tape: backward root must be scalar, got shape " + shape_str(r.value.shape));
    ensure_grad(root.idx);
    nodes_[static_cast<std::size_t>(root.idx)].grad.data[0] = seed;
    for (int i = root.idx; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.has_grad && n.backprop) n.backprop(*this);
    }
    for (const Binding& b : bindings_) {
      Node& n = nodes_[static_cast<std::size_t>(b.node)];
      if (!n.has_grad) continue;
      Tensor& g = b.store->grad(b.name);
      for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += n.grad.data[i];
    }
    backward_done_ = true;
  }

  // ---- elementwise and linear algebra ----

  Var matmul(Var a, Var b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (A.ndim() == 2 && B.ndim() == 2) {
      if (A.dim(1) != B.dim(0))
        throw std::invalid_argument("matmul: inner dimensions disagree: " + shape_str(A.shape) + " vs " +
                                    shape_str(B.shape));
      const int m = A.dim(0), k = A.dim(1), n = B.dim(1);
      Tensor out = Tensor::zeros({m, n});
      for (int i = 0; i < m; ++i)
        for (int l = 0; l < k; ++l) {
          const double av = A.at(i, l);
          if (av == 0.0) continue;
          const double* brow = &B.data[static_cast<std::size_t>(l) * n];
          double* orow = &out.data[static_cast<std::size_t>(i) * n];
          for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
      return make(std::move(out), {a, b}, [a, b, m, k, n](Tape& t, const Tensor& g) {
        if (t.needs(a)) {
          Tensor& da = t.grad_ref(a);
          const Tensor& Bv = t.value(b);
          for (int i = 0; i < m; ++i)
            for (int l = 0; l < k; ++l) {
              double s = 0.0;
              const double* grow = &g.data[static_cast<std::size_t>(i) * n];
              const double* brow = &Bv.data[static_cast<std::size_t>(l) * n];
              for (int j = 0; j < n; ++j) s += grow[j] * brow[j];
              da.at(i, l) += s;
            }
        }
        if (t.needs(b)) {
          Tensor& db = t.grad_ref(b);
          const Tensor& Av = t.value(a);
          for (int l = 0; l < k; ++l)
            for (int i = 0; i < m; ++i) {
              const double av = Av.at(i, l);
              if (av == 0.0) continue;
              const double* grow = &g.data[static_cast<std::size_t>(i) * n];
              double* drow = &db.data[static_cast<std::size_t>(l) * n];
              for (int j = 0; j < n; ++j) drow[j] += av * grow[j];
            }
        }
      });
    }
    if (A.ndim() == 2 && B.ndim() == 1) {
      if (A.dim(1) != B.dim(0))
        throw std::invalid_argument("matmul: inner dimensions disagree: " + shape_str(A.shape) + " vs " +
                                    shape_str(B.shape));
      const int m = A.dim(0), k = A.dim(1);
      Tensor out = Tensor::zeros({m});
      for (int i = 0; i < m; ++i) {
        double s = 0.0;
        const double* arow = &A.data[static_cast<std::size_t>(i) * k];
        for (int l = 0; l < k; ++l) s += arow[l] * B.data[static_cast<std::size_t>(l)];
        out.at(i) = s;
      }
      return make(std::move(out), {a, b}, [a, b, m, k](Tape& t, const Tensor& g) {
        if (t.needs(a)) {
          Tensor& da = t.grad_ref(a);
          const Tensor& x = t.value(b);
          for (int i = 0; i < m; ++i) {
            const double gi = g.at(i);
            if (gi == 0.0) continue;
            double* drow = &da.data[static_cast<std::size_t>(i) * k];
            for (int l = 0; l < k; ++l) drow[l] += gi * x.data[static_cast<std::size_t>(l)];
          }
        }
        if (t.needs(b)) {
          Tensor& db = t.grad_ref(b);
          const Tensor& Av = t.value(a);
          for (int i = 0; i < m; ++i) {
            const double gi = g.at(i);
            if (gi == 0.0) continue;
            const double* arow = &Av.data[static_cast<std::size_t>(i) * k];
            for (int l = 0; l < k; ++l) db.data[static_cast<std::size_t>(l)] += gi * arow[l];
          }
        }
      });
    }
    throw std::invalid_argument("matmul: unsupported ranks " + shape_str(A.shape) + " vs " + shape_str(B.shape));
  }

  // same shapes, or (m,n) + (n) broadcast over rows
  Var add(Var a, Var b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (A.shape == B.shape) {
      Tensor out = A;
      for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += B.data[i];
      return make(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
        t.accumulate(a, g);
        t.accumulate(b, g);
      });
    }
    if (A.ndim() == 2 && B.ndim() == 1 && A.dim(1) == B.dim(0)) {
      const int m = A.dim(0), n = A.dim(1);
      Tensor out = A;
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.at(i, j) += B.at(j);
      return make(std::move(out), {a, b}, [a, b, m, n](Tape& t, const Tensor& g) {
        t.accumulate(a, g);
        if (t.needs(b)) {
          Tensor& db = t.grad_ref(b);
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) db.at(j) += g.at(i, j);
        }
      });
    }
    throw std::invalid_argument("add: incompatible shapes " + shape_str(A.shape) + " vs " + shape_str(B.shape));
  }

  Var sub(Var a, Var b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (A.shape != B.shape)
      throw std::invalid_argument("sub: shape mismatch " + shape_str(A.shape) + " vs " + shape_str(B.shape));
    Tensor out = A;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= B.data[i];
    return make(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
      t.accumulate(a, g);
      if (t.needs(b)) {
        Tensor& db = t.grad_ref(b);
        for (std::size_t i = 0; i < g.data.size(); ++i) db.data[i] -= g.data[i];
      }
    });
  }

  Var mul(Var a, Var b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (A.shape != B.shape)
      throw std::invalid_argument("mul: shape mismatch " + shape_str(A.shape) + " vs " + shape_str(B.shape));
    Tensor out = A;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= B.data[i];
    return make(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
      if (t.needs(a)) {
        Tensor& da = t.grad_ref(a);
        const Tensor& Bv = t.value(b);
        for (std::size_t i = 0; i < g.data.size(); ++i) da.data[i] += g.data[i] * Bv.data[i];
      }
      if (t.needs(b)) {
        Tensor& db = t.grad_ref(b);
        const Tensor& Av = t.value(a);
        for (std::size_t i = 0; i < g.data.size(); ++i) db.data[i] += g.data[i] * Av.data[i];
      }
    });
  }

  // (1-w)*a + w*b elementwise; the GRU state blend
  Var mix(Var w, Var a, Var b) {
    const Tensor& W = value(w);
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (W.shape != A.shape || W.shape != B.shape)
      throw std::invalid_argument("mix: shape mismatch " + shape_str(W.shape) + ", " + shape_str(A.shape) + ", " +
                                  shape_str(B.shape));
    Tensor out = A;
    for (std::size_t i = 0; i < out.data.size(); ++i)
      out.data[i] = (1.0 - W.data[i]) * A.data[i] + W.data[i] * B.data[i];
    return make(std::move(out), {w, a, b}, [w, a, b](Tape& t, const Tensor& g) {
      const Tensor& Wv = t.value(w);
      if (t.needs(w)) {
        Tensor& dw = t.grad_ref(w);
        const Tensor& Av = t.value(a);
        const Tensor& Bv = t.value(b);
        for (std::size_t i = 0; i < g.data.size(); ++i) dw.data[i] += g.data[i] * (Bv.data[i] - Av.data[i]);
      }
      if (t.needs(a)) {
        Tensor& da = t.grad_ref(a);
        for (std::size_t i = 0; i < g.data.size(); ++i) da.data[i] += g.data[i] * (1.0 - Wv.data[i]);
      }
      if (t.needs(b)) {
        Tensor& db = t.grad_ref(b);
        for (std::size_t i = 0; i < g.data.size(); ++i) db.data[i] += g.data[i] * Wv.data[i];
      }
    });
  }

  Var scale(Var a, double c) {
    Tensor out = value(a);
    for (double& v : out.data) v *= c;
    return make(std::move(out), {a}, [a, c](Tape& t, const Tensor& g) {
      if (!t.needs(a)) return;
      Tensor& da = t.grad_ref(a);
      for (std::size_t i = 0; i < g.data.size(); ++i) da.data[i] += c * g.data[i];
    });
  }

  Var sigmoid(Var a) {
    Tensor out = value(a);
    for (double& v : out.data) v = stable_sigmoid(v);
    Var o = make(std::move(out), {a}, nullptr);
    set_backprop(o, [a, o](Tape& t, const Tensor& g) {
      if (!t.needs(a)) return;
      Tensor& da = t.grad_ref(a);
      const Tensor& y = t.value(o);
      for (std::size_t i = 0; i < g.data.size(); ++i) da.data[i] += g.data[i] * y.data[i] * (1.0 - y.data[i]);
    });
    return o;
  }

  Var tanh(Var a) {
    Tensor out = value(a);
    for (double& v : out.data) v = std::tanh(v);
    Var o = make(std::move(out), {a}, nullptr);
    set_backprop(o, [a, o](Tape& t, const Tensor& g) {
      if (!t.needs(a)) return;
      Tensor& da = t.grad_ref(a);
      const Tensor& y = t.value(o);
      for (std::size_t i = 0; i < g.data.size(); ++i) da.data[i] += g.data[i] * (1.0 - y.data[i] * y.data[i]);
    });
    return o;
  }

  // max-subtracted softmax; axis 0 for 1D, axis 0 (columns) or 1 (rows) for 2D
  Var softmax(Var a, int axis = -1) {
    const Tensor& A = value(a);
    if (A.ndim() == 1) {
      if (axis != -1 && axis != 0)
        throw std::invalid_argument("softmax: invalid axis for shape " + shape_str(A.shape));
      Tensor out = A;
      softmax_inplace(out.data.data(), out.data.size(), 1);
      Var o = make(std::move(out), {a}, nullptr);
      set_backprop(o, [a, o](Tape& t, const Tensor& g) {
        if (!t.needs(a)) return;
        softmax_backward_slice(t.grad_ref(a).data.data(), g.data.data(), t.value(o).data.data(), g.data.size(), 1);
      });
      return o;
    }
    if (A.ndim() == 2) {
      if (axis != 0 && axis != 1)
        throw std::invalid_argument("softmax: invalid axis for shape " + shape_str(A.shape));
      const int m = A.dim(0), n = A.dim(1);
      Tensor out = A;
      if (axis == 1) {
        for (int i = 0; i < m; ++i) softmax_inplace(&out.data[static_cast<std::size_t>(i) * n], static_cast<std::size_t>(n), 1);
      } else {
        for (int j = 0; j < n; ++j) softmax_inplace(&out.data[static_cast<std::size_t>(j)], static_cast<std::size_t>(m), n);
      }
      Var o = make(std::move(out), {a}, nullptr);
      set_backprop(o, [a, o, m, n, axis](Tape& t, const Tensor& g) {
        if (!t.needs(a)) return;
        Tensor& da = t.grad_ref(a);
        const Tensor& y = t.value(o);
        if (axis == 1) {
          for (int i = 0; i < m; ++i)
            softmax_backward_slice(&da.data[static_cast<std::size_t>(i) * n], &g.data[static_cast<std::size_t>(i) * n],
                                   &y.data[static_cast<std::size_t>(i) * n], static_cast<std::size_t>(n), 1);
        } else {
          for (int j = 0; j < n; ++j)
            softmax_backward_slice(&da.data[static_cast<std::size_t>(j)], &g.data[static_cast<std::size_t>(j)],
                                   &y.data[static_cast<std::size_t>(j)], static_cast<std::size_t>(m), n);
        }
      });
      return o;
    }
    throw std::invalid_argument("softmax: unsupported rank " + shape_str(A.shape));
  }

  // softmax over unmasked positions of a 1D score vector; masked outputs are 0
  Var masked_softmax(Var a, std::vector<unsigned char> mask) {
    const Tensor& A = value(a);
    if (A.ndim() != 1 || static_cast<std::size_t>(A.numel()) != mask.size())
      throw std::invalid_argument("masked_softmax: mask length does not match " + shape_str(A.shape));
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (mask[i]) mx = std::max(mx, A.data[i]);
    if (!std::isfinite(mx)) throw std::invalid_argument("masked_softmax: all positions masked");
    Tensor out = Tensor::zeros(A.shape);
    double z = 0.0;
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (!mask[i]) continue;
      out.data[i] = std::exp(A.data[i] - mx);
      z += out.data[i];
    }
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (mask[i]) out.data[i] /= z;
    Var o = make(std::move(out), {a}, nullptr);
    set_backprop(o, [a, o, mask = std::move(mask)](Tape& t, const Tensor& g) {
      if (!t.needs(a)) return;
      Tensor& da = t.grad_ref(a);
      const Tensor& y = t.value(o);
      double s = 0.0;
      for (std::size_t i = 0; i < mask.size(); ++i)
        if (mask[i]) s += g.data[i] * y.data[i];
      for (std::size_t i = 0; i < mask.size(); ++i)
        if (mask[i]) da.data[i] += y.data[i] * (g.data[i] - s);
    });
    return o;
  }

  // natural log with the probability clamp applied first
  Var log(Var a) {
    const Tensor& A = value(a);
    Tensor out = A;
    for (double& v : out.data) v = std::log(std::max(v, kProbEps));
    return make(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
      if (!t.needs(a)) return;
      Tensor& da = t.grad_ref(a);
      const Tensor& x = t.value(a);
      for (std::size_t i = 0; i < g.data.size(); ++i)
        if (x.data[i] > kProbEps) da.data[i] += g.data[i] / x.data[i];
    });
  }

  Var pick(Var a, int index) {
    const Tensor& A = value(a);
    if (A.ndim() != 1) throw std::invalid_argument("pick: expected 1D tensor, got " + shape_str(A.shape));
    if (index < 0 || index >= A.dim(0))
      throw std::invalid_argument("pick: index " + std::to_string(index) + " out of range for " + shape_str(A.shape));
    return make(Tensor::scalar(A.at(index)), {a}, [a, index](Tape& t, const Tensor& g) {
      if (t.needs(a)) t.grad_ref(a).at(index) += g.data[0];
    });
  }

  Var concat(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    int total = 0;
    for (Var p : parts) {
      const Tensor& P = value(p);
      if (P.ndim() != 1) throw std::invalid_argument("concat: expected 1D tensors, got " + shape_str(P.shape));
      total += P.dim(0);
    }
    Tensor out = Tensor::zeros({total});
    int off = 0;
    for (Var p : parts) {
      const Tensor& P = value(p);
      std::copy(P.data.begin(), P.data.end(), out.data.begin() + off);
      off += P.dim(0);
    }
    return make(std::move(out), parts, [parts](Tape& t, const Tensor& g) {
      int off = 0;
      for (Var p : parts) {
        const int len = t.value(p).dim(0);
        if (t.needs(p)) {
          Tensor& dp = t.grad_ref(p);
          for (int i = 0; i < len; ++i) dp.at(i) += g.data[static_cast<std::size_t>(off + i)];
        }
        off += len;
      }
    });
  }

  // embedding-style row read from a 2D table
  Var lookup(Var table, int row) {
    const Tensor& T = value(table);
    if (T.ndim() != 2) throw std::invalid_argument("lookup: expected 2D table, got " + shape_str(T.shape));
    if (row < 0 || row >= T.dim(0))
      throw std::invalid_argument("lookup: row " + std::to_string(row) + " out of range for " + shape_str(T.shape));
    const int n = T.dim(1);
    Tensor out = Tensor::zeros({n});
    std::copy(T.data.begin() + static_cast<std::size_t>(row) * n, T.data.begin() + (static_cast<std::size_t>(row) + 1) * n,
              out.data.begin());
    return make(std::move(out), {table}, [table, row, n](Tape& t, const Tensor& g) {
      if (!t.needs(table)) return;
      Tensor& dt = t.grad_ref(table);
      for (int i = 0; i < n; ++i) dt.at(row, i) += g.at(i);
    });
  }

  Var dot(Var a, Var b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (A.ndim() != 1 || A.shape != B.shape)
      throw std::invalid_argument("dot: shape mismatch " + shape_str(A.shape) + " vs " + shape_str(B.shape));
    double s = 0.0;
    for (std::size_t i = 0; i < A.data.size(); ++i) s += A.data[i] * B.data[i];
    return make(Tensor::scalar(s), {a, b}, [a, b](Tape& t, const Tensor& g) {
      const double gv = g.data[0];
      if (t.needs(a)) {
        Tensor& da = t.grad_ref(a);
        const Tensor& Bv = t.value(b);
        for (std::size_t i = 0; i < da.data.size(); ++i) da.data[i] += gv * Bv.data[i];
      }
      if (t.needs(b)) {
        Tensor& db = t.grad_ref(b);
        const Tensor& Av = t.value(a);
        for (std::size_t i = 0; i < db.data.size(); ++i) db.data[i] += gv * Av.data[i];
      }
    });
  }

  Var sum(Var a) {
    const Tensor& A = value(a);
    double s = 0.0;
    for (double v : A.data) s += v;
    return make(Tensor::scalar(s), {a}, [a](Tape& t, const Tensor& g) {
      if (!t.needs(a)) return;
      Tensor& da = t.grad_ref(a);
      for (double& v : da.data) v += g.data[0];
    });
  }

  // sum_i w[i] * items[i]; the attention context combination
  Var weighted_sum(Var w, const std::vector<Var>& items) {
    const Tensor& W = value(w);
    if (W.ndim() != 1 || static_cast<std::size_t>(W.numel()) != items.size())
      throw std::invalid_argument("weighted_sum: weight length does not match item count");
    if (items.empty()) throw std::invalid_argument("weighted_sum: no items");
    const Tensor& first = value(items[0]);
    Tensor out = Tensor::zeros(first.shape);
    for (std::size_t i = 0; i < items.size(); ++i) {
      const Tensor& v = value(items[i]);
      if (v.shape != first.shape) throw std::invalid_argument("weighted_sum: item shape mismatch");
      const double wi = W.data[i];
      for (std::size_t j = 0; j < out.data.size(); ++j) out.data[j] += wi * v.data[j];
    }
    std::vector<Var> parents = items;
    parents.push_back(w);
    return make(std::move(out), parents, [w, items](Tape& t, const Tensor& g) {
      const Tensor& Wv = t.value(w);
      for (std::size_t i = 0; i < items.size(); ++i) {
        const Tensor& v = t.value(items[i]);
        if (t.needs(w)) {
          double s = 0.0;
          for (std::size_t j = 0; j < g.data.size(); ++j) s += g.data[j] * v.data[j];
          t.grad_ref(w).data[i] += s;
        }
        if (t.needs(items[i])) {
          Tensor& dv = t.grad_ref(items[i]);
          const double wi = Wv.data[i];
          for (std::size_t j = 0; j < g.data.size(); ++j) dv.data[j] += wi * g.data[j];
        }
      }
    });
  }

  Var reshape(Var a, Shape s) {
    const Tensor& A = value(a);
    if (shape_numel(s) != A.numel())
      throw std::invalid_argument("reshape: element count mismatch " + shape_str(A.shape) + " -> " + shape_str(s));
    Tensor out(std::move(s), A.data);
    return make(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
      if (!t.needs(a)) return;
      Tensor& da = t.grad_ref(a);
      for (std::size_t i = 0; i < g.data.size(); ++i) da.data[i] += g.data[i];
    });
  }

  // ---- the adversary's conv stack ----

  // 3x3 same-padding convolution followed by the logistic activation.
  // input: (C,H,W) or (N,C,H,W); weights: (F,C,3,3); bias: (F).
  Var conv2d_3x3(Var input, Var weights, Var bias) {
    const Tensor& I = value(input);
    const Tensor& W = value(weights);
    const Tensor& B = value(bias);
    const bool batched = I.ndim() == 4;
    if (!batched && I.ndim() != 3)
      throw std::invalid_argument("conv2d_3x3: expected 3D or 4D input, got " + shape_str(I.shape));
    if (W.ndim() != 4 || W.dim(2) != 3 || W.dim(3) != 3)
      throw std::invalid_argument("conv2d_3x3: expected (F,C,3,3) weights, got " + shape_str(W.shape));
    const int N = batched ? I.dim(0) : 1;
    const int C = batched ? I.dim(1) : I.dim(0);
    const int H = batched ? I.dim(2) : I.dim(1);
    const int Wd = batched ? I.dim(3) : I.dim(2);
    const int F = W.dim(0);
    if (W.dim(1) != C)
      throw std::invalid_argument("conv2d_3x3: input channels " + std::to_string(C) + " do not match weight channels " +
                                  std::to_string(W.dim(1)));
    if (B.ndim() != 1 || B.dim(0) != F)
      throw std::invalid_argument("conv2d_3x3: bias shape " + shape_str(B.shape) + " does not match feature count " +
                                  std::to_string(F));
    Tensor out = batched ? Tensor::zeros({N, F, H, Wd}) : Tensor::zeros({F, H, Wd});
    const auto in_at = [&](int n, int c, int y, int x) -> double {
      if (y < 0 || y >= H || x < 0 || x >= Wd) return 0.0;
      const std::size_t idx = ((static_cast<std::size_t>(n) * C + c) * H + y) * Wd + x;
      return I.data[idx];
    };
    for (int n = 0; n < N; ++n)
      for (int f = 0; f < F; ++f)
        for (int y = 0; y < H; ++y)
          for (int x = 0; x < Wd; ++x) {
            double s = B.at(f);
            for (int c = 0; c < C; ++c)
              for (int u = 0; u < 3; ++u)
                for (int v = 0; v < 3; ++v) s += W.at(f, c, u, v) * in_at(n, c, y + u - 1, x + v - 1);
            out.data[((static_cast<std::size_t>(n) * F + f) * H + y) * Wd + x] = stable_sigmoid(s);
          }
    Var o = make(std::move(out), {input, weights, bias}, nullptr);
    set_backprop(o, [input, weights, bias, o, N, C, H, Wd, F](Tape& t, const Tensor& g) {
      const Tensor& y = t.value(o);
      const Tensor& I2 = t.value(input);
      const Tensor& W2 = t.value(weights);
      // through the activation
      Tensor dpre = Tensor::zeros(y.shape);
      for (std::size_t i = 0; i < g.data.size(); ++i)
        dpre.data[i] = g.data[i] * y.data[i] * (1.0 - y.data[i]);
      const auto in_at = [&](int n, int c, int yy, int xx) -> double {
        if (yy < 0 || yy >= H || xx < 0 || xx >= Wd) return 0.0;
        return I2.data[((static_cast<std::size_t>(n) * C + c) * H + yy) * Wd + xx];
      };
      const auto dpre_at = [&](int n, int f, int yy, int xx) -> double {
        if (yy < 0 || yy >= H || xx < 0 || xx >= Wd) return 0.0;
        return dpre.data[((static_cast<std::size_t>(n) * F + f) * H + yy) * Wd + xx];
      };
      if (t.needs(bias)) {
        Tensor& db = t.grad_ref(bias);
        for (int n = 0; n < N; ++n)
          for (int f = 0; f < F; ++f) {
            double s = 0.0;
            for (int yy = 0; yy < H; ++yy)
              for (int xx = 0; xx < Wd; ++xx) s += dpre_at(n, f, yy, xx);
            db.at(f) += s;
          }
      }
      if (t.needs(weights)) {
        Tensor& dw = t.grad_ref(weights);
        for (int n = 0; n < N; ++n)
          for (int f = 0; f < F; ++f)
            for (int c = 0; c < C; ++c)
              for (int u = 0; u < 3; ++u)
                for (int v = 0; v < 3; ++v) {
                  double s = 0.0;
                  for (int yy = 0; yy < H; ++yy)
                    for (int xx = 0; xx < Wd; ++xx)
                      s += dpre_at(n, f, yy, xx) * in_at(n, c, yy + u - 1, xx + v - 1);
                  dw.at(f, c, u, v) += s;
                }
      }
      if (t.needs(input)) {
        Tensor& di = t.grad_ref(input);
        for (int n = 0; n < N; ++n)
          for (int c = 0; c < C; ++c)
            for (int yy = 0; yy < H; ++yy)
              for (int xx = 0; xx < Wd; ++xx) {
                double s = 0.0;
                for (int f = 0; f < F; ++f)
                  for (int u = 0; u < 3; ++u)
                    for (int v = 0; v < 3; ++v) s += W2.at(f, c, u, v) * dpre_at(n, f, yy - u + 1, xx - v + 1);
                di.data[((static_cast<std::size_t>(n) * C + c) * H + yy) * Wd + xx] += s;
              }
      }
    });
    return o;
  }

  // Non-overlapping 2x2 max pool. Odd trailing rows/columns behave as if
  // padded with -inf: the window max is taken over in-bounds cells only.
  // Gradient routes to the argmax cell; ties break to the first cell in
  // row-major order.
  Var maxpool_2x2(Var input) {
    const Tensor& I = value(input);
    const bool batched = I.ndim() == 4;
    if (!batched && I.ndim() != 3)
      throw std::invalid_argument("maxpool_2x2: expected 3D or 4D input, got " + shape_str(I.shape));
    const int N = batched ? I.dim(0) : 1;
    const int C = batched ? I.dim(1) : I.dim(0);
    const int H = batched ? I.dim(2) : I.dim(1);
    const int W = batched ? I.dim(3) : I.dim(2);
    const int OH = (H + 1) / 2, OW = (W + 1) / 2;
    Tensor out = batched ? Tensor::zeros({N, C, OH, OW}) : Tensor::zeros({C, OH, OW});
    std::vector<std::size_t> argmax(out.data.size());
    std::size_t oi = 0;
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < OH; ++y)
          for (int x = 0; x < OW; ++x, ++oi) {
            double best = -std::numeric_limits<double>::infinity();
            std::size_t best_idx = 0;
            for (int u = 0; u < 2; ++u)
              for (int v = 0; v < 2; ++v) {
                const int yy = 2 * y + u, xx = 2 * x + v;
                if (yy >= H || xx >= W) continue;
                const std::size_t idx = ((static_cast<std::size_t>(n) * C + c) * H + yy) * W + xx;
                if (I.data[idx] > best) {
                  best = I.data[idx];
                  best_idx = idx;
                }
              }
            out.data[oi] = best;
            argmax[oi] = best_idx;
          }
    return make(std::move(out), {input}, [input, argmax = std::move(argmax)](Tape& t, const Tensor& g) {
      if (!t.needs(input)) return;
      Tensor& di = t.grad_ref(input);
      for (std::size_t i = 0; i < g.data.size(); ++i) di.data[argmax[i]] += g.data[i];
    });
  }

  // Per-feature batch normalization over (N,F) or per-channel over (N,C,H,W).
  // Train mode normalizes by batch statistics (biased variance) and, when
  // update_running is set, folds them into the running stats; eval mode uses
  // the running stats and is deterministic.
  Var batch_norm(Var x, Var gamma, Var beta, Tensor& running_mean, Tensor& running_var, bool train,
                 bool update_running = true, double momentum = 0.1) {
    const Tensor& X = value(x);
    if (X.ndim() != 2 && X.ndim() != 4)
      throw std::invalid_argument("batch_norm: expected (N,F) or (N,C,H,W), got " + shape_str(X.shape));
    const int N = X.dim(0);
    const int C = X.dim(1);
    const std::int64_t spatial = X.numel() / (static_cast<std::int64_t>(N) * C);
    const std::int64_t m = static_cast<std::int64_t>(N) * spatial;
    const Tensor& G = value(gamma);
    const Tensor& Bt = value(beta);
    if (G.numel() != C || Bt.numel() != C || running_mean.numel() != C || running_var.numel() != C)
      throw std::invalid_argument("batch_norm: scale/shift/running stats must have length " + std::to_string(C));
    if (train && N < 2)
      throw std::invalid_argument("batch_norm: train mode requires batch size >= 2, got " + std::to_string(N));

    std::vector<double> mean(static_cast<std::size_t>(C)), inv_std(static_cast<std::size_t>(C));
    const auto x_index = [&](int n, int c, std::int64_t s) -> std::size_t {
      return static_cast<std::size_t>((static_cast<std::int64_t>(n) * C + c) * spatial + s);
    };
    if (train) {
      for (int c = 0; c < C; ++c) {
        double mu = 0.0;
        for (int n = 0; n < N; ++n)
          for (std::int64_t s = 0; s < spatial; ++s) mu += X.data[x_index(n, c, s)];
        mu /= static_cast<double>(m);
        double var = 0.0;
        for (int n = 0; n < N; ++n)
          for (std::int64_t s = 0; s < spatial; ++s) {
            const double d = X.data[x_index(n, c, s)] - mu;
            var += d * d;
          }
        var /= static_cast<double>(m);
        mean[static_cast<std::size_t>(c)] = mu;
        inv_std[static_cast<std::size_t>(c)] = 1.0 / std::sqrt(var + kBnEps);
        if (update_running) {
          running_mean.at(c) = (1.0 - momentum) * running_mean.at(c) + momentum * mu;
          running_var.at(c) = (1.0 - momentum) * running_var.at(c) + momentum * var;
        }
      }
    } else {
      for (int c = 0; c < C; ++c) {
        mean[static_cast<std::size_t>(c)] = running_mean.at(c);
        inv_std[static_cast<std::size_t>(c)] = 1.0 / std::sqrt(running_var.at(c) + kBnEps);
      }
    }
    Tensor xhat = Tensor::zeros(X.shape);
    Tensor out = Tensor::zeros(X.shape);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (std::int64_t s = 0; s < spatial; ++s) {
          const std::size_t i = x_index(n, c, s);
          xhat.data[i] = (X.data[i] - mean[static_cast<std::size_t>(c)]) * inv_std[static_cast<std::size_t>(c)];
          out.data[i] = G.at(c) * xhat.data[i] + Bt.at(c);
        }
    return make(std::move(out), {x, gamma, beta},
                [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), N, C, spatial, m,
                 train](Tape& t, const Tensor& g) {
                  const auto x_index = [&](int n, int c, std::int64_t s) -> std::size_t {
                    return static_cast<std::size_t>((static_cast<std::int64_t>(n) * C + c) * spatial + s);
                  };
                  const Tensor& Gm = t.value(gamma);
                  std::vector<double> sum_g(static_cast<std::size_t>(C), 0.0),
                      sum_gx(static_cast<std::size_t>(C), 0.0);
                  for (int n = 0; n < N; ++n)
                    for (int c = 0; c < C; ++c)
                      for (std::int64_t s = 0; s < spatial; ++s) {
                        const std::size_t i = x_index(n, c, s);
                        sum_g[static_cast<std::size_t>(c)] += g.data[i];
                        sum_gx[static_cast<std::size_t>(c)] += g.data[i] * xhat.data[i];
                      }
                  if (t.needs(gamma)) {
                    Tensor& dg = t.grad_ref(gamma);
                    for (int c = 0; c < C; ++c) dg.at(c) += sum_gx[static_cast<std::size_t>(c)];
                  }
                  if (t.needs(beta)) {
                    Tensor& db = t.grad_ref(beta);
                    for (int c = 0; c < C; ++c) db.at(c) += sum_g[static_cast<std::size_t>(c)];
                  }
                  if (t.needs(x)) {
                    Tensor& dx = t.grad_ref(x);
                    for (int n = 0; n < N; ++n)
                      for (int c = 0; c < C; ++c) {
                        const double gam = Gm.at(c) * inv_std[static_cast<std::size_t>(c)];
                        for (std::int64_t s = 0; s < spatial; ++s) {
                          const std::size_t i = x_index(n, c, s);
                          if (train) {
                            dx.data[i] += gam * (g.data[i] - sum_g[static_cast<std::size_t>(c)] / static_cast<double>(m) -
                                                 xhat.data[i] * sum_gx[static_cast<std::size_t>(c)] / static_cast<double>(m));
                          } else {
                            dx.data[i] += gam * g.data[i];
                          }
                        }
                      }
                  }
                });
  }

  // mean binary cross entropy of predictions (1D or scalar) against 0/1
  // labels; predictions clamped into (kProbEps, 1-kProbEps) before the logs
  Var bce(Var pred, std::vector<double> labels) {
    const Tensor& P = value(pred);
    if (static_cast<std::size_t>(P.numel()) != labels.size())
      throw std::invalid_argument("bce: prediction count " + std::to_string(P.numel()) +
                                  " does not match label count " + std::to_string(labels.size()));
    if (labels.empty()) throw std::invalid_argument("bce: empty input");
    const double n = static_cast<double>(labels.size());
    double loss = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const double p = clamp_prob(P.data[i]);
      loss -= labels[i] * std::log(p) + (1.0 - labels[i]) * std::log(1.0 - p);
    }
    loss /= n;
    return make(Tensor::scalar(loss), {pred}, [pred, labels = std::move(labels), n](Tape& t, const Tensor& g) {
      if (!t.needs(pred)) return;
      Tensor& dp = t.grad_ref(pred);
      const Tensor& P2 = t.value(pred);
      for (std::size_t i = 0; i < labels.size(); ++i) {
        const double raw = P2.data[i];
        if (raw <= kProbEps || raw >= 1.0 - kProbEps) continue;  // clamped region
        dp.data[i] += g.data[0] * (raw - labels[i]) / (raw * (1.0 - raw)) / n;
      }
    });
  }

  static double clamp_prob(double p) { return std::min(std::max(p, kProbEps), 1.0 - kProbEps); }

  // logistic with outputs kept strictly inside (0,1) against rounding
  static double stable_sigmoid(double x) {
    double y;
    if (x >= 0.0) {
      y = 1.0 / (1.0 + std::exp(-x));
    } else {
      const double e = std::exp(x);
      y = e / (1.0 + e);
    }
    constexpr double hi = 1.0 - 1e-16;
    constexpr double lo = 1e-300;
    return std::min(std::max(y, lo), hi);
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool needs_grad = false;
    std::function<void(Tape&)> backprop;
  };
  struct Binding {
    ParameterStore* store;
    std::string name;
    int node;
  };

  using BackFn = std::function<void(Tape&, const Tensor&)>;

  Node& node(Var v) {
    if (!v.valid() || static_cast<std::size_t>(v.idx) >= nodes_.size())
      throw std::invalid_argument("tape: invalid variable handle");
    return nodes_[static_cast<std::size_t>(v.idx)];
  }
  const Node& node(Var v) const {
    if (!v.valid() || static_cast<std::size_t>(v.idx) >= nodes_.size())
      throw std::invalid_argument("tape: invalid variable handle");
    return nodes_[static_cast<std::size_t>(v.idx)];
  }

  Var push(Tensor value, bool needs_grad, std::function<void(Tape&)> backprop) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    n.backprop = std::move(backprop);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  bool needs(Var v) const { return node(v).needs_grad; }

  void ensure_grad(int idx) {
    Node& n = nodes_[static_cast<std::size_t>(idx)];
    if (!n.has_grad) {
      n.grad = Tensor::zeros(n.value.shape);
      n.has_grad = true;
    }
  }

  Tensor& grad_ref(Var v) {
    ensure_grad(v.idx);
    return node(v).grad;
  }

  void accumulate(Var v, const Tensor& g) {
    if (!needs(v)) return;
    Tensor& dv = grad_ref(v);
    for (std::size_t i = 0; i < g.data.size(); ++i) dv.data[i] += g.data[i];
  }

  // Wraps a VJP callback so it only runs while recording and any parent
  // needs a gradient.
  Var make(Tensor value, const std::vector<Var>& parents, BackFn fn) {
    bool needs_grad = false;
    if (recording_)
      for (Var p : parents)
        if (node(p).needs_grad) {
          needs_grad = true;
          break;
        }
    Var out = push(std::move(value), needs_grad, nullptr);
    if (needs_grad && fn) set_backprop(out, std::move(fn));
    return out;
  }

  void set_backprop(Var v, BackFn fn) {
    Node& n = node(v);
    if (!n.needs_grad) return;
    const int idx = v.idx;
    n.backprop = [idx, fn = std::move(fn)](Tape& t) {
      const Tensor& g = t.nodes_[static_cast<std::size_t>(idx)].grad;
      fn(t, g);
    };
  }

  static void softmax_inplace(double* v, std::size_t n, std::size_t stride) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, v[i * stride]);
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      v[i * stride] = std::exp(v[i * stride] - mx);
      z += v[i * stride];
    }
    for (std::size_t i = 0; i < n; ++i) v[i * stride] /= z;
  }

  static void softmax_backward_slice(double* dx, const double* g, const double* y, std::size_t n, std::size_t stride) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += g[i * stride] * y[i * stride];
    for (std::size_t i = 0; i < n; ++i) dx[i * stride] += y[i * stride] * (g[i * stride] - s);
  }

  bool recording_;
  bool backward_done_ = false;
  std::vector<Node> nodes_;
  std::vector<Binding> bindings_;
};

}  // namespace advnmt
