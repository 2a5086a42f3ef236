#pragma once

// Mixture-of-adapter-experts routing: gate probabilities, Top-K / Top-P
// selection, renormalization and the site forward rule
//
//   out = W x + sum_{k selected} p_k * A_k (B_k x),  p_k = P_k / sum_{j selected} P_j
//
// Placeholder experts may be selected; they add nothing to the sum. By default
// they keep their share of the renormalization denominator.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "hilo/adapters.hpp"
#include "hilo/autodiff.hpp"
#include "hilo/errors.hpp"
#include "hilo/matrix.hpp"

namespace hilo {

struct ActivationPolicy {
  enum class Kind { TopK, TopP };
  Kind kind = Kind::TopK;
  std::size_t k = 2;
  double threshold = 0.5;

  static ActivationPolicy top_k(std::size_t k) { return {Kind::TopK, k, 0.0}; }
  static ActivationPolicy top_p(double threshold) { return {Kind::TopP, 0, threshold}; }

  bool is_top_k() const { return kind == Kind::TopK; }

  void validate(std::size_t n_experts) const {
    if (kind == Kind::TopK) {
      if (k < 1 || k > n_experts) {
        throw ConfigError("TopK: K=" + std::to_string(k) + " must lie in [1, " + std::to_string(n_experts) + "]");
      }
    } else if (!(threshold > 0.0 && threshold < 1.0)) {
      throw ConfigError("TopP: threshold must lie in (0, 1)");
    }
  }

  std::string describe() const {
    if (kind == Kind::TopK) return "top_k=" + std::to_string(k);
    std::ostringstream os;
    os << "top_p=" << threshold;
    return os.str();
  }

  bool operator==(const ActivationPolicy&) const = default;
};

/// How selected placeholders enter the renormalization denominator.
enum class PlaceholderMass {
  Retain,  // denominator over every selected expert (null-expert reading)
  Exclude  // denominator over selected real experts only
};

/// Single linear map to expert logits, no bias.
struct GateNetwork {
  Matrix weight;  // E x d
  std::size_t n_experts() const { return weight.rows(); }
  std::size_t input_dim() const { return weight.cols(); }
};

struct ExpertLayerSite {
  Matrix base_weight;  // n x m, frozen
  std::vector<LoraAdapter> experts;
  GateNetwork gate;
  ActivationPolicy policy;
  PlaceholderMass placeholder_mass = PlaceholderMass::Retain;

  std::size_t out_dim() const { return base_weight.rows(); }
  std::size_t in_dim() const { return base_weight.cols(); }

  void validate() const {
    if (gate.n_experts() != experts.size()) {
      throw ConfigError("site: gate has " + std::to_string(gate.n_experts()) + " rows for " +
                        std::to_string(experts.size()) + " experts");
    }
    if (gate.input_dim() != in_dim()) throw ShapeError("site: gate input width differs from base weight");
    if (std::none_of(experts.begin(), experts.end(), [](const LoraAdapter& e) { return !e.is_placeholder; })) {
      throw ConfigError("site: needs at least one real expert");
    }
    for (const auto& e : experts) {
      if (e.n != out_dim() || e.m != in_dim()) throw ShapeError("site: expert dimensions differ from base weight");
    }
    policy.validate(experts.size());
  }
};

/// softmax(gate.weight * x).
inline std::vector<double> gate_probs(const GateNetwork& gate, std::span<const double> x) {
  return softmax(matvec(gate.weight, x));
}

namespace detail {
/// Indices ordered by descending probability, lowest index first on ties.
inline std::vector<std::size_t> descending_order(std::span<const double> probs) {
  std::vector<std::size_t> order(probs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
  return order;
}
}  // namespace detail

/// The K most probable experts, returned in ascending index order.
inline std::vector<std::size_t> select_topk(std::span<const double> probs, std::size_t k) {
  if (k < 1 || k > probs.size()) {
    throw ConfigError("select_topk: K=" + std::to_string(k) + " with " + std::to_string(probs.size()) + " experts");
  }
  auto order = detail::descending_order(probs);
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

/// Shortest descending-probability prefix whose mass reaches `threshold`,
/// returned in ascending index order.
inline std::vector<std::size_t> select_topp(std::span<const double> probs, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("select_topp: threshold must lie in (0, 1)");
  if (probs.empty()) throw ShapeError("select_topp: no experts");
  const auto order = detail::descending_order(probs);
  std::vector<std::size_t> picked;
  double cum = 0.0;
  for (std::size_t idx : order) {
    picked.push_back(idx);
    cum += probs[idx];
    if (cum >= threshold) break;
  }
  std::sort(picked.begin(), picked.end());
  return picked;
}

inline std::vector<std::size_t> select_experts(const ActivationPolicy& policy, std::span<const double> probs) {
  return policy.is_top_k() ? select_topk(probs, policy.k) : select_topp(probs, policy.threshold);
}

/// p_k = P_k / sum_{j in selected} P_j, aligned with `selected`.
inline std::vector<double> renormalize(std::span<const double> probs, std::span<const std::size_t> selected) {
  if (selected.empty()) throw ContractError("renormalize: empty selection");
  double total = 0.0;
  for (std::size_t k : selected) {
    if (k >= probs.size()) throw ShapeError("renormalize: index out of range");
    total += probs[k];
  }
  if (!(total > 0.0)) throw ContractError("renormalize: selected probabilities must be positive");
  std::vector<double> w;
  w.reserve(selected.size());
  for (std::size_t k : selected) w.push_back(probs[k] / total);
  return w;
}

/// Selection plus mixing weights for one token.
struct Routing {
  std::vector<std::size_t> selected;  // ascending
  std::vector<double> weights;        // aligned with selected; placeholders carry weight only in Retain mode
};

inline Routing route(const ActivationPolicy& policy, PlaceholderMass mode, std::span<const double> probs,
                     const std::vector<LoraAdapter>& experts) {
  Routing r;
  r.selected = select_experts(policy, probs);
  if (mode == PlaceholderMass::Retain) {
    r.weights = renormalize(probs, r.selected);
    return r;
  }
  std::vector<std::size_t> real;
  for (std::size_t k : r.selected) {
    if (!experts[k].is_placeholder) real.push_back(k);
  }
  r.weights.assign(r.selected.size(), 0.0);
  if (real.empty()) return r;
  const auto w = renormalize(probs, real);
  std::size_t j = 0;
  for (std::size_t i = 0; i < r.selected.size(); ++i) {
    if (!experts[r.selected[i]].is_placeholder) r.weights[i] = w[j++];
  }
  return r;
}

/// Site output for a single token x (length m).
inline std::vector<double> moe_forward(const ExpertLayerSite& site, std::span<const double> x) {
  if (x.size() != site.in_dim()) throw ShapeError("moe_forward: input length differs from site width");
  auto out = matvec(site.base_weight, x);
  const auto probs = gate_probs(site.gate, x);
  const Routing r = route(site.policy, site.placeholder_mass, probs, site.experts);
  for (std::size_t i = 0; i < r.selected.size(); ++i) {
    const LoraAdapter& e = site.experts[r.selected[i]];
    if (e.is_placeholder) continue;
    const auto d = adapter_delta(e, x);
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += r.weights[i] * d[j];
  }
  return out;
}

/// Tape handles for one site's weights.
struct SiteBinding {
  Var base_weight;
  Var gate;
  std::vector<Var> a;  // invalid Var for placeholders
  std::vector<Var> b;
};

/// Binds base weight as frozen and gate/adapters as trainable leaves.
inline SiteBinding bind_site(Tape& t, const ExpertLayerSite& site) {
  SiteBinding s;
  s.base_weight = t.frozen(site.base_weight);
  s.gate = t.parameter(site.gate.weight);
  for (const auto& e : site.experts) {
    if (e.is_placeholder) {
      s.a.emplace_back();
      s.b.emplace_back();
    } else {
      s.a.push_back(t.parameter(e.a));
      s.b.push_back(t.parameter(e.b));
    }
  }
  return s;
}

/// Everything a taped site forward exposes to callers (losses, tracing).
struct SiteForward {
  Var output;       // T x n
  Var base;         // T x n, W x per row
  Var adapter_out;  // T x n, mixture of selected deltas
  Var probs;        // T x E gate probabilities
  Var weights;      // T x E renormalized weights (zero where unselected)
  std::vector<Routing> routing;                  // per row
  std::vector<std::vector<double>> expert_linf;  // per row, aligned with routing.selected: max |p_k delta_k|
};

/// Taped forward for a block of token rows X (T x m). Each row is routed
/// independently; only selected real experts are evaluated, on the rows that
/// picked them.
inline SiteForward moe_forward_rows(Tape& t, const ExpertLayerSite& site, const SiteBinding& bind, Var x_rows) {
  const Matrix& xv = t.value(x_rows);
  if (xv.cols() != site.in_dim()) throw ShapeError("moe_forward_rows: input width differs from site width");
  const std::size_t rows = xv.rows();
  const std::size_t n_exp = site.experts.size();

  SiteForward f;
  f.base = ad::matmul_nt(t, x_rows, bind.base_weight);
  f.probs = ad::softmax_rows(t, ad::matmul_nt(t, x_rows, bind.gate));
  const Matrix& pv = t.value(f.probs);
  for (double p : pv.data()) {
    if (!std::isfinite(p)) throw NumericError("moe_forward_rows: non-finite gate probabilities");
  }

  Matrix mask(rows, n_exp);
  f.routing.reserve(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    Routing rt = route(site.policy, site.placeholder_mass, pv.row(r), site.experts);
    for (std::size_t k : rt.selected) {
      if (site.placeholder_mass == PlaceholderMass::Retain || !site.experts[k].is_placeholder) mask(r, k) = 1.0;
    }
    f.routing.push_back(std::move(rt));
  }
  f.weights = ad::masked_row_normalize(t, f.probs, mask);

  std::vector<Var> parts;
  std::vector<std::vector<std::size_t>> rows_for(n_exp);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t k : f.routing[r].selected) {
      if (!site.experts[k].is_placeholder) rows_for[k].push_back(r);
    }
  }
  f.expert_linf.resize(rows);
  for (std::size_t r = 0; r < rows; ++r) f.expert_linf[r].assign(f.routing[r].selected.size(), 0.0);

  for (std::size_t k = 0; k < n_exp; ++k) {
    if (rows_for[k].empty()) continue;
    const auto& idx = rows_for[k];
    Var xk = ad::gather_rows(t, x_rows, idx);
    Var dk = adapter_delta_rows(t, xk, bind.a[k], bind.b[k], site.experts[k].scale);
    Var wk = ad::gather_elements(t, f.weights, idx, std::vector<std::size_t>(idx.size(), k));
    Var sk = ad::scale_rows(t, dk, wk);
    const Matrix& sv = t.value(sk);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      double linf = 0.0;
      for (double v : sv.row(i)) linf = std::max(linf, std::abs(v));
      const auto& sel = f.routing[idx[i]].selected;
      const auto pos = static_cast<std::size_t>(std::find(sel.begin(), sel.end(), k) - sel.begin());
      f.expert_linf[idx[i]][pos] = linf;
    }
    parts.push_back(ad::scatter_rows(t, sk, idx, rows));
  }

  if (parts.empty()) {
    f.adapter_out = t.constant(Matrix(rows, site.out_dim()));
  } else {
    f.adapter_out = parts.front();
    for (std::size_t i = 1; i < parts.size(); ++i) f.adapter_out = ad::add(t, f.adapter_out, parts[i]);
  }
  f.output = ad::add(t, f.base, f.adapter_out);
  return f;
}

}  // namespace hilo
