#pragma once

// Reverse-mode automatic differentiation over dense matrices.
//
// A Tape records every operation in execution order, so node ids form a
// topological order by construction. Each non-leaf node keeps the closure
// that produced its value; replay() re-runs them, which lets callers perturb
// an externally owned parameter in place and re-evaluate the whole graph
// (finite-difference checks rely on this). Routing decisions such as top-k
// masks are captured as constants at record time and stay fixed on replay.

#include <cmath>
#include <cstddef>
#include <functional>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hilo/errors.hpp"
#include "hilo/matrix.hpp"

namespace hilo {

struct Var {
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);
  std::size_t id = npos;
  bool valid() const { return id != npos; }
};

class Tape;

/// Gradients produced by one backward pass, indexed by node.
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::vector<std::optional<Matrix>> grads) : grads_(std::move(grads)) {}

  /// nullptr when no gradient reached the node (or it does not require one).
  const Matrix* get(Var v) const {
    if (v.id >= grads_.size() || !grads_[v.id]) return nullptr;
    return &*grads_[v.id];
  }

  const Matrix& at(Var v) const {
    const Matrix* g = get(v);
    if (g == nullptr) throw LookupError("no gradient recorded for node " + std::to_string(v.id));
    return *g;
  }

 private:
  std::vector<std::optional<Matrix>> grads_;
};

class Tape {
 public:
  using ForwardFn = std::function<Matrix(const Tape&)>;
  /// Receives the gradient w.r.t. the node's output; accumulates into inputs.
  using BackwardFn = std::function<void(Tape&, const Matrix&)>;

  /// Owned constant; never receives a gradient.
  Var constant(Matrix value) {
    Node n;
    n.owned = std::move(value);
    return push(std::move(n));
  }

  /// Externally owned leaf that receives gradients. `value` must outlive the tape.
  Var parameter(const Matrix& value) {
    Node n;
    n.external = &value;
    n.requires_grad = true;
    n.is_leaf = true;
    return push(std::move(n));
  }

  /// Externally owned leaf that never receives gradients (frozen weights).
  Var frozen(const Matrix& value) {
    Node n;
    n.external = &value;
    return push(std::move(n));
  }

  /// Record an operation. The forward closure runs once immediately.
  Var record(std::vector<Var> inputs, ForwardFn forward, BackwardFn backward) {
    Node n;
    for (Var in : inputs) {
      if (in.id >= nodes_.size()) throw ContractError("Tape::record: input from another tape");
      n.requires_grad = n.requires_grad || nodes_[in.id].requires_grad;
    }
    n.owned = forward(*this);
    n.forward = std::move(forward);
    if (n.requires_grad) n.backward = std::move(backward);
    n.inputs = std::move(inputs);
    return push(std::move(n));
  }

  const Matrix& value(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.external != nullptr ? *n.external : n.owned;
  }

  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Recompute every derived node in recording order.
  void replay() {
    for (Node& n : nodes_) {
      if (n.forward) n.owned = n.forward(*this);
    }
  }

  /// Reverse sweep from a scalar loss node.
  Gradients backward(Var loss) {
    const Matrix& lv = value(loss);
    if (lv.rows() != 1 || lv.cols() != 1) {
      throw ContractError("backward: loss must be scalar, got " + shape_str(lv));
    }
    grads_.assign(nodes_.size(), std::nullopt);
    grads_[loss.id] = Matrix::scalar(1.0);
    for (std::size_t id = loss.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!grads_[id] || !n.backward) continue;
      const Matrix& g = *grads_[id];
      n.backward(*this, g);
    }
    std::vector<std::optional<Matrix>> out = std::move(grads_);
    grads_.clear();
    // Only leaves that asked for gradients keep them.
    for (std::size_t id = 0; id < out.size(); ++id) {
      if (!nodes_[id].is_leaf) out[id].reset();
    }
    return Gradients(std::move(out));
  }

  /// Called from backward closures: add `g` into the gradient of `v`.
  void accumulate(Var v, const Matrix& g) {
    if (!nodes_[v.id].requires_grad) return;
    auto& slot = grads_[v.id];
    if (!slot) {
      slot = g;
    } else {
      axpy(1.0, g, *slot);
    }
  }

  void accumulate(Var v, Matrix&& g) {
    if (!nodes_[v.id].requires_grad) return;
    auto& slot = grads_[v.id];
    if (!slot) {
      slot = std::move(g);
    } else {
      axpy(1.0, g, *slot);
    }
  }

 private:
  struct Node {
    Matrix owned;
    const Matrix* external = nullptr;
    bool requires_grad = false;
    bool is_leaf = false;
    std::vector<Var> inputs;
    ForwardFn forward;
    BackwardFn backward;
  };

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  std::vector<std::optional<Matrix>> grads_;
};

/// Differentiable primitives. Only what the toy transformer and the expert
/// sites need; there is no general broadcasting.
namespace ad {

inline Var matmul(Tape& t, Var a, Var b) {
  return t.record(
      {a, b}, [a, b](const Tape& tp) { return hilo::matmul(tp.value(a), tp.value(b)); },
      [a, b](Tape& tp, const Matrix& g) {
        if (tp.requires_grad(a)) tp.accumulate(a, matmul_nt(g, tp.value(b)));
        if (tp.requires_grad(b)) tp.accumulate(b, matmul_tn(tp.value(a), g));
      });
}

/// a * transpose(b); b is stored (out x in) like a weight matrix.
inline Var matmul_nt(Tape& t, Var a, Var b) {
  return t.record(
      {a, b}, [a, b](const Tape& tp) { return hilo::matmul_nt(tp.value(a), tp.value(b)); },
      [a, b](Tape& tp, const Matrix& g) {
        if (tp.requires_grad(a)) tp.accumulate(a, hilo::matmul(g, tp.value(b)));
        if (tp.requires_grad(b)) tp.accumulate(b, matmul_tn(g, tp.value(a)));
      });
}

inline Var transpose(Tape& t, Var a) {
  return t.record(
      {a}, [a](const Tape& tp) { return hilo::transpose(tp.value(a)); },
      [a](Tape& tp, const Matrix& g) { tp.accumulate(a, hilo::transpose(g)); });
}

inline Var add(Tape& t, Var a, Var b) {
  return t.record(
      {a, b}, [a, b](const Tape& tp) { return tp.value(a) + tp.value(b); },
      [a, b](Tape& tp, const Matrix& g) {
        tp.accumulate(a, g);
        tp.accumulate(b, g);
      });
}

/// Elementwise (Hadamard) product.
inline Var mul(Tape& t, Var a, Var b) {
  return t.record(
      {a, b},
      [a, b](const Tape& tp) {
        const Matrix& x = tp.value(a);
        const Matrix& y = tp.value(b);
        hilo::detail::require_same_shape(x, y, "mul");
        Matrix out = x;
        for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] *= y.data()[i];
        return out;
      },
      [a, b](Tape& tp, const Matrix& g) {
        const Matrix& x = tp.value(a);
        const Matrix& y = tp.value(b);
        if (tp.requires_grad(a)) {
          Matrix ga = g;
          for (std::size_t i = 0; i < ga.size(); ++i) ga.data()[i] *= y.data()[i];
          tp.accumulate(a, std::move(ga));
        }
        if (tp.requires_grad(b)) {
          Matrix gb = g;
          for (std::size_t i = 0; i < gb.size(); ++i) gb.data()[i] *= x.data()[i];
          tp.accumulate(b, std::move(gb));
        }
      });
}

inline Var scale(Tape& t, Var a, double s) {
  return t.record(
      {a}, [a, s](const Tape& tp) { return s * tp.value(a); },
      [a, s](Tape& tp, const Matrix& g) { tp.accumulate(a, s * g); });
}

inline Var relu(Tape& t, Var a) {
  return t.record(
      {a},
      [a](const Tape& tp) {
        Matrix out = tp.value(a);
        for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
        return out;
      },
      [a](Tape& tp, const Matrix& g) {
        const Matrix& x = tp.value(a);
        Matrix ga = g;
        for (std::size_t i = 0; i < ga.size(); ++i) {
          if (!(x.data()[i] > 0.0)) ga.data()[i] = 0.0;
        }
        tp.accumulate(a, std::move(ga));
      });
}

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluA = 0.044715;

/// GELU, tanh approximation.
inline Var gelu(Tape& t, Var a) {
  return t.record(
      {a},
      [a](const Tape& tp) {
        Matrix out = tp.value(a);
        for (double& v : out.data()) {
          const double u = kGeluC * (v + kGeluA * v * v * v);
          v = 0.5 * v * (1.0 + std::tanh(u));
        }
        return out;
      },
      [a](Tape& tp, const Matrix& g) {
        const Matrix& x = tp.value(a);
        Matrix ga = g;
        for (std::size_t i = 0; i < ga.size(); ++i) {
          const double v = x.data()[i];
          const double th = std::tanh(kGeluC * (v + kGeluA * v * v * v));
          const double du = kGeluC * (1.0 + 3.0 * kGeluA * v * v);
          ga.data()[i] *= 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du;
        }
        tp.accumulate(a, std::move(ga));
      });
}

/// Row-wise softmax.
inline Var softmax_rows(Tape& t, Var a) {
  return t.record(
      {a},
      [a](const Tape& tp) {
        const Matrix& x = tp.value(a);
        Matrix out(x.rows(), x.cols());
        for (std::size_t r = 0; r < x.rows(); ++r) {
          const auto p = hilo::softmax(x.row(r));
          std::copy(p.begin(), p.end(), out.row(r).begin());
        }
        return out;
      },
      [a](Tape& tp, const Matrix& g) {
        // value of this node is not addressable here, so recompute.
        const Matrix& x = tp.value(a);
        Matrix ga(x.rows(), x.cols());
        for (std::size_t r = 0; r < x.rows(); ++r) {
          const auto y = hilo::softmax(x.row(r));
          const auto gr = g.row(r);
          double dot = 0.0;
          for (std::size_t c = 0; c < y.size(); ++c) dot += gr[c] * y[c];
          for (std::size_t c = 0; c < y.size(); ++c) ga(r, c) = y[c] * (gr[c] - dot);
        }
        tp.accumulate(a, std::move(ga));
      });
}

/// Mean cross-entropy over rows whose target is >= 0. Each row's softmax is
/// taken over its first `class_limit` columns (all columns when 0).
inline Var cross_entropy(Tape& t, Var logits, std::vector<int> targets, std::size_t class_limit = 0) {
  const Matrix& z = t.value(logits);
  if (targets.size() != z.rows()) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + shape_str(z));
  }
  const std::size_t classes = class_limit == 0 ? z.cols() : class_limit;
  if (classes > z.cols()) throw ShapeError("cross_entropy: class_limit exceeds logit width");
  std::size_t count = 0;
  for (int y : targets) {
    if (y >= static_cast<int>(classes)) throw ShapeError("cross_entropy: target out of range");
    if (y >= 0) ++count;
  }
  if (count == 0) throw ContractError("cross_entropy: no labelled rows");
  return t.record(
      {logits},
      [logits, targets, classes, count](const Tape& tp) {
        const Matrix& x = tp.value(logits);
        double total = 0.0;
        for (std::size_t r = 0; r < x.rows(); ++r) {
          if (targets[r] < 0) continue;
          const auto p = hilo::softmax(x.row(r).first(classes));
          total += -std::log(p[static_cast<std::size_t>(targets[r])]);
        }
        return Matrix::scalar(total / static_cast<double>(count));
      },
      [logits, targets, classes, count](Tape& tp, const Matrix& g) {
        const Matrix& x = tp.value(logits);
        Matrix gz(x.rows(), x.cols());
        const double s = g(0, 0) / static_cast<double>(count);
        for (std::size_t r = 0; r < x.rows(); ++r) {
          if (targets[r] < 0) continue;
          const auto p = hilo::softmax(x.row(r).first(classes));
          for (std::size_t c = 0; c < classes; ++c) gz(r, c) = s * p[c];
          gz(r, static_cast<std::size_t>(targets[r])) -= s;
        }
        tp.accumulate(logits, std::move(gz));
      });
}

/// Row-wise layer normalization without affine parameters.
inline Var layer_norm_rows(Tape& t, Var a, double eps = 1e-5) {
  auto normalize = [eps](const Matrix& x, std::vector<double>* inv_std) {
    Matrix y(x.rows(), x.cols());
    const double n = static_cast<double>(x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
      const auto xr = x.row(r);
      double mean = 0.0;
      for (double v : xr) mean += v;
      mean /= n;
      double var = 0.0;
      for (double v : xr) var += (v - mean) * (v - mean);
      var /= n;
      const double is = 1.0 / std::sqrt(var + eps);
      if (inv_std != nullptr) inv_std->push_back(is);
      for (std::size_t c = 0; c < x.cols(); ++c) y(r, c) = (xr[c] - mean) * is;
    }
    return y;
  };
  return t.record(
      {a}, [a, normalize](const Tape& tp) { return normalize(tp.value(a), nullptr); },
      [a, normalize](Tape& tp, const Matrix& g) {
        std::vector<double> inv_std;
        const Matrix y = normalize(tp.value(a), &inv_std);
        const double n = static_cast<double>(y.cols());
        Matrix ga(y.rows(), y.cols());
        for (std::size_t r = 0; r < y.rows(); ++r) {
          double mg = 0.0;
          double mgy = 0.0;
          for (std::size_t c = 0; c < y.cols(); ++c) {
            mg += g(r, c);
            mgy += g(r, c) * y(r, c);
          }
          mg /= n;
          mgy /= n;
          for (std::size_t c = 0; c < y.cols(); ++c) {
            ga(r, c) = inv_std[r] * (g(r, c) - mg - y(r, c) * mgy);
          }
        }
        tp.accumulate(a, std::move(ga));
      });
}

/// out[i, :] = table[idx[i], :]. Embedding lookup is this with a vocabulary table.
inline Var gather_rows(Tape& t, Var table, std::vector<std::size_t> idx) {
  const Matrix& tab = t.value(table);
  if (idx.empty()) throw ShapeError("gather_rows: empty index list");
  for (std::size_t i : idx) {
    if (i >= tab.rows()) throw ShapeError("gather_rows: index " + std::to_string(i) + " out of range");
  }
  return t.record(
      {table},
      [table, idx](const Tape& tp) {
        const Matrix& x = tp.value(table);
        Matrix out(idx.size(), x.cols());
        for (std::size_t i = 0; i < idx.size(); ++i) {
          std::copy(x.row(idx[i]).begin(), x.row(idx[i]).end(), out.row(i).begin());
        }
        return out;
      },
      [table, idx](Tape& tp, const Matrix& g) {
        const Matrix& x = tp.value(table);
        Matrix gt(x.rows(), x.cols());
        for (std::size_t i = 0; i < idx.size(); ++i) {
          auto dst = gt.row(idx[i]);
          const auto src = g.row(i);
          for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
        }
        tp.accumulate(table, std::move(gt));
      });
}

inline Var embedding_lookup(Tape& t, Var table, std::vector<std::size_t> ids) {
  return gather_rows(t, table, std::move(ids));
}

/// Adjoint of gather_rows: out has n_rows rows, out[idx[i], :] += a[i, :].
inline Var scatter_rows(Tape& t, Var a, std::vector<std::size_t> idx, std::size_t n_rows) {
  if (t.value(a).rows() != idx.size()) throw ShapeError("scatter_rows: index count differs from rows");
  for (std::size_t i : idx) {
    if (i >= n_rows) throw ShapeError("scatter_rows: index out of range");
  }
  return t.record(
      {a},
      [a, idx, n_rows](const Tape& tp) {
        const Matrix& x = tp.value(a);
        Matrix out(n_rows, x.cols());
        for (std::size_t i = 0; i < idx.size(); ++i) {
          auto dst = out.row(idx[i]);
          const auto src = x.row(i);
          for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
        }
        return out;
      },
      [a, idx](Tape& tp, const Matrix& g) {
        Matrix ga(idx.size(), g.cols());
        for (std::size_t i = 0; i < idx.size(); ++i) {
          std::copy(g.row(idx[i]).begin(), g.row(idx[i]).end(), ga.row(i).begin());
        }
        tp.accumulate(a, std::move(ga));
      });
}

inline Var slice_rows(Tape& t, Var a, std::size_t begin, std::size_t count) {
  if (count == 0 || begin + count > t.value(a).rows()) throw ShapeError("slice_rows: range out of bounds");
  std::vector<std::size_t> idx(count);
  for (std::size_t i = 0; i < count; ++i) idx[i] = begin + i;
  return gather_rows(t, a, std::move(idx));
}

inline Var slice_cols(Tape& t, Var a, std::size_t begin, std::size_t count) {
  if (count == 0 || begin + count > t.value(a).cols()) throw ShapeError("slice_cols: range out of bounds");
  return t.record(
      {a},
      [a, begin, count](const Tape& tp) {
        const Matrix& x = tp.value(a);
        Matrix out(x.rows(), count);
        for (std::size_t r = 0; r < x.rows(); ++r)
          for (std::size_t c = 0; c < count; ++c) out(r, c) = x(r, begin + c);
        return out;
      },
      [a, begin, count](Tape& tp, const Matrix& g) {
        const Matrix& x = tp.value(a);
        Matrix ga(x.rows(), x.cols());
        for (std::size_t r = 0; r < x.rows(); ++r)
          for (std::size_t c = 0; c < count; ++c) ga(r, begin + c) = g(r, c);
        tp.accumulate(a, std::move(ga));
      });
}

inline Var concat_rows(Tape& t, std::vector<Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t cols = t.value(parts.front()).cols();
  for (Var p : parts) {
    if (t.value(p).cols() != cols) throw ShapeError("concat_rows: column counts differ");
  }
  return t.record(
      parts,
      [parts, cols](const Tape& tp) {
        std::size_t rows = 0;
        for (Var p : parts) rows += tp.value(p).rows();
        Matrix out(rows, cols);
        std::size_t r0 = 0;
        for (Var p : parts) {
          const Matrix& x = tp.value(p);
          std::copy(x.data().begin(), x.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(r0 * cols));
          r0 += x.rows();
        }
        return out;
      },
      [parts, cols](Tape& tp, const Matrix& g) {
        std::size_t r0 = 0;
        for (Var p : parts) {
          const std::size_t rows = tp.value(p).rows();
          if (tp.requires_grad(p)) {
            const auto first = g.data().begin() + static_cast<std::ptrdiff_t>(r0 * cols);
            tp.accumulate(p, Matrix(rows, cols, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(rows * cols))));
          }
          r0 += rows;
        }
      });
}

inline Var concat_cols(Tape& t, std::vector<Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t rows = t.value(parts.front()).rows();
  for (Var p : parts) {
    if (t.value(p).rows() != rows) throw ShapeError("concat_cols: row counts differ");
  }
  return t.record(
      parts,
      [parts, rows](const Tape& tp) {
        std::size_t cols = 0;
        for (Var p : parts) cols += tp.value(p).cols();
        Matrix out(rows, cols);
        std::size_t c0 = 0;
        for (Var p : parts) {
          const Matrix& x = tp.value(p);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < x.cols(); ++c) out(r, c0 + c) = x(r, c);
          c0 += x.cols();
        }
        return out;
      },
      [parts, rows](Tape& tp, const Matrix& g) {
        std::size_t c0 = 0;
        for (Var p : parts) {
          const std::size_t cols = tp.value(p).cols();
          if (tp.requires_grad(p)) {
            Matrix gp(rows, cols);
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t c = 0; c < cols; ++c) gp(r, c) = g(r, c0 + c);
            tp.accumulate(p, std::move(gp));
          }
          c0 += cols;
        }
      });
}

/// q[r, j] = mask[r, j] * p[r, j] / sum_i mask[r, i] * p[r, i]; mask entries are 0 or 1.
/// A row whose mask is all zero yields a zero row.
inline Var masked_row_normalize(Tape& t, Var p, Matrix mask) {
  hilo::detail::require_same_shape(t.value(p), mask, "masked_row_normalize");
  for (double m : mask.data()) {
    if (m != 0.0 && m != 1.0) throw ContractError("masked_row_normalize: mask must be 0/1");
  }
  auto forward = [p, mask](const Tape& tp) {
    const Matrix& x = tp.value(p);
    Matrix q(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
      double s = 0.0;
      double picked = 0.0;
      for (std::size_t c = 0; c < x.cols(); ++c) {
        s += mask(r, c) * x(r, c);
        picked += mask(r, c);
      }
      if (picked == 0.0) continue;
      if (!(s > 0.0)) throw ContractError("masked_row_normalize: zero-mass selection");
      for (std::size_t c = 0; c < x.cols(); ++c) q(r, c) = mask(r, c) * x(r, c) / s;
    }
    return q;
  };
  return t.record({p}, forward, [p, mask, forward](Tape& tp, const Matrix& g) {
    const Matrix& x = tp.value(p);
    const Matrix q = forward(tp);
    Matrix gp(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
      double s = 0.0;
      double gq = 0.0;
      for (std::size_t c = 0; c < x.cols(); ++c) {
        s += mask(r, c) * x(r, c);
        gq += g(r, c) * q(r, c);
      }
      if (!(s > 0.0)) continue;
      for (std::size_t c = 0; c < x.cols(); ++c) gp(r, c) = mask(r, c) / s * (g(r, c) - gq);
    }
    tp.accumulate(p, std::move(gp));
  });
}

/// Row r of `a` multiplied by w[r, 0]; w is a column vector.
inline Var scale_rows(Tape& t, Var a, Var w) {
  const Matrix& x = t.value(a);
  const Matrix& wv = t.value(w);
  if (wv.cols() != 1 || wv.rows() != x.rows()) {
    throw ShapeError("scale_rows: weights " + shape_str(wv) + " for " + shape_str(x));
  }
  return t.record(
      {a, w},
      [a, w](const Tape& tp) {
        Matrix out = tp.value(a);
        const Matrix& wv2 = tp.value(w);
        for (std::size_t r = 0; r < out.rows(); ++r)
          for (double& v : out.row(r)) v *= wv2(r, 0);
        return out;
      },
      [a, w](Tape& tp, const Matrix& g) {
        const Matrix& x2 = tp.value(a);
        const Matrix& wv2 = tp.value(w);
        if (tp.requires_grad(a)) {
          Matrix ga = g;
          for (std::size_t r = 0; r < ga.rows(); ++r)
            for (double& v : ga.row(r)) v *= wv2(r, 0);
          tp.accumulate(a, std::move(ga));
        }
        if (tp.requires_grad(w)) {
          Matrix gw(wv2.rows(), 1);
          for (std::size_t r = 0; r < x2.rows(); ++r) {
            double acc = 0.0;
            for (std::size_t c = 0; c < x2.cols(); ++c) acc += g(r, c) * x2(r, c);
            gw(r, 0) = acc;
          }
          tp.accumulate(w, std::move(gw));
        }
      });
}

/// Column vector of a[rows[k], cols[k]].
inline Var gather_elements(Tape& t, Var a, std::vector<std::size_t> rows, std::vector<std::size_t> cols) {
  const Matrix& x = t.value(a);
  if (rows.size() != cols.size() || rows.empty()) throw ShapeError("gather_elements: bad index lists");
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k] >= x.rows() || cols[k] >= x.cols()) throw ShapeError("gather_elements: index out of range");
  }
  return t.record(
      {a},
      [a, rows, cols](const Tape& tp) {
        const Matrix& x2 = tp.value(a);
        Matrix out(rows.size(), 1);
        for (std::size_t k = 0; k < rows.size(); ++k) out(k, 0) = x2(rows[k], cols[k]);
        return out;
      },
      [a, rows, cols](Tape& tp, const Matrix& g) {
        const Matrix& x2 = tp.value(a);
        Matrix ga(x2.rows(), x2.cols());
        for (std::size_t k = 0; k < rows.size(); ++k) ga(rows[k], cols[k]) += g(k, 0);
        tp.accumulate(a, std::move(ga));
      });
}

/// Sum of all entries as a 1x1 matrix.
inline Var sum(Tape& t, Var a) {
  return t.record(
      {a},
      [a](const Tape& tp) {
        double s = 0.0;
        for (double v : tp.value(a).data()) s += v;
        return Matrix::scalar(s);
      },
      [a](Tape& tp, const Matrix& g) {
        const Matrix& x = tp.value(a);
        tp.accumulate(a, Matrix(x.rows(), x.cols(), g(0, 0)));
      });
}

inline Var mean(Tape& t, Var a) {
  const double n = static_cast<double>(t.value(a).size());
  return scale(t, sum(t, a), 1.0 / n);
}

/// 1 x cols row of column means.
inline Var mean_rows(Tape& t, Var a) {
  return t.record(
      {a},
      [a](const Tape& tp) {
        const Matrix& x = tp.value(a);
        Matrix out(1, x.cols());
        for (std::size_t r = 0; r < x.rows(); ++r)
          for (std::size_t c = 0; c < x.cols(); ++c) out(0, c) += x(r, c);
        for (double& v : out.data()) v /= static_cast<double>(x.rows());
        return out;
      },
      [a](Tape& tp, const Matrix& g) {
        const Matrix& x = tp.value(a);
        Matrix ga(x.rows(), x.cols());
        const double inv = 1.0 / static_cast<double>(x.rows());
        for (std::size_t r = 0; r < x.rows(); ++r)
          for (std::size_t c = 0; c < x.cols(); ++c) ga(r, c) = g(0, c) * inv;
        tp.accumulate(a, std::move(ga));
      });
}

}  // namespace ad
}  // namespace hilo
