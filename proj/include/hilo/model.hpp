#pragma once

// Desk-scale pre-norm transformer whose projections can be replaced by
// mixture-of-adapter-expert sites. Base weights are random and frozen; only
// gates and adapters train.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "hilo/adapters.hpp"
#include "hilo/allocation.hpp"
#include "hilo/autodiff.hpp"
#include "hilo/gating.hpp"
#include "hilo/rng.hpp"

namespace hilo {

/// Projections that can carry an adapter site, in forward order.
inline const std::vector<std::string>& projection_names() {
  static const std::vector<std::string> names = {"attn_q", "attn_k", "attn_v", "attn_o", "ffn_up", "ffn_down"};
  return names;
}

struct ToyModelConfig {
  int n_layers = 8;
  int d_model = 32;
  int d_ff = 64;
  int n_heads = 2;
  int vocab_size = 64;
  int seq_len = 8;
  std::vector<std::string> sites = {"ffn_up", "ffn_down"};
  AllocationPlan plan;
  double adapter_std = kDefaultAdapterStd;
  PlaceholderMass placeholder_mass = PlaceholderMass::Retain;

  /// (out, in) of a named projection.
  SiteShape projection_shape(const std::string& name) const {
    const auto d = static_cast<std::size_t>(d_model);
    const auto f = static_cast<std::size_t>(d_ff);
    if (name == "ffn_up") return {name, f, d};
    if (name == "ffn_down") return {name, d, f};
    if (name == "attn_q" || name == "attn_k" || name == "attn_v" || name == "attn_o") return {name, d, d};
    throw ConfigError("unknown adapter site '" + name + "'");
  }

  /// Site shapes in forward order; plans for this model must use exactly these.
  std::vector<SiteShape> site_shapes() const {
    std::vector<SiteShape> out;
    for (const auto& p : projection_names()) {
      if (std::find(sites.begin(), sites.end(), p) != sites.end()) out.push_back(projection_shape(p));
    }
    return out;
  }

  void validate() const {
    if (n_layers < 1 || d_model < 1 || d_ff < 1 || n_heads < 1 || vocab_size < 2 || seq_len < 1) {
      throw ConfigError("model: all dimensions must be positive");
    }
    if (d_model % n_heads != 0) throw ConfigError("model: d_model must be divisible by n_heads");
    if (sites.empty()) throw ConfigError("model: at least one adapter site is required");
    for (const auto& s : sites) {
      projection_shape(s);
      if (std::count(sites.begin(), sites.end(), s) > 1) throw ConfigError("model: duplicate site '" + s + "'");
    }
    plan.validate();
    if (plan.n_layers != n_layers) {
      throw ConfigError("model: plan '" + plan.name + "' has " + std::to_string(plan.n_layers) +
                        " layers, model has " + std::to_string(n_layers));
    }
    if (plan.sites != site_shapes()) throw ConfigError("model: plan sites do not match the model's adapter sites");
    if (!(adapter_std > 0.0)) throw ConfigError("model: adapter_std must be positive");
  }
};

/// Plan for a toy geometry from per-layer lists.
inline AllocationPlan toy_plan(const ToyModelConfig& cfg, std::string name, std::vector<int> experts,
                               std::vector<int> ranks, std::vector<int> placeholders, ActivationPolicy policy) {
  return make_plan(std::move(name), cfg.site_shapes(), std::move(experts), std::move(ranks), std::move(placeholders),
                   policy);
}

/// Uniform plan: `experts` real experts of `rank` in every layer.
inline AllocationPlan uniform_toy_plan(const ToyModelConfig& cfg, int experts, int rank, std::size_t top_k,
                                       int placeholders = 0) {
  const auto n = static_cast<std::size_t>(cfg.n_layers);
  return toy_plan(cfg, "uniform", std::vector<int>(n, experts), std::vector<int>(n, rank),
                  std::vector<int>(n, placeholders), ActivationPolicy::top_k(top_k));
}

/// A training or evaluation sequence. targets[i] < 0 means "not scored".
struct Example {
  std::vector<int> tokens;
  std::vector<int> targets;
};

struct ModelLayer {
  std::vector<Matrix> projections;    // aligned with projection_names(); empty where a site owns the weight
  std::vector<ExpertLayerSite> sites; // aligned with config().sites order in forward order
  std::vector<int> site_of;           // projection index -> site index or -1
};

/// Everything one forward pass leaves on the tape.
struct ModelForward {
  Var logits;                                  // rows = all tokens of the batch, in order
  std::vector<std::vector<SiteForward>> sites; // [layer][site]
  std::vector<Var> parameters;                 // same order as ToyModel::trainable_parameters()
  std::vector<std::size_t> row_example;        // row -> example index in the batch
  std::vector<std::size_t> row_position;       // row -> token position
};

class ToyModel {
 public:
  /// Random frozen base, adapters via init_adapter, zero gates (uniform routing at step 0).
  static ToyModel build(const ToyModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ToyModel m;
    m.cfg_ = cfg;
    m.seed_ = seed;
    const auto d = static_cast<std::size_t>(cfg.d_model);
    const auto v = static_cast<std::size_t>(cfg.vocab_size);
    m.embedding_ = random_matrix(v, d, 1.0, derive_seed(seed, {0xE0}));
    m.positional_ = random_matrix(static_cast<std::size_t>(cfg.seq_len), d, 1.0, derive_seed(seed, {0xE1}));
    m.head_ = random_matrix(v, d, 1.0 / std::sqrt(static_cast<double>(d)), derive_seed(seed, {0xE2}));

    const auto shapes = cfg.site_shapes();
    for (int l = 0; l < cfg.n_layers; ++l) {
      const auto lz = static_cast<std::size_t>(l);
      ModelLayer layer;
      layer.site_of.assign(projection_names().size(), -1);
      for (std::size_t p = 0; p < projection_names().size(); ++p) {
        const auto shape = cfg.projection_shape(projection_names()[p]);
        Matrix w = random_matrix(shape.n, shape.m, 1.0 / std::sqrt(static_cast<double>(shape.m)),
                                 derive_seed(seed, {0xB0, lz, p}));
        const auto it = std::find_if(shapes.begin(), shapes.end(), [&](const SiteShape& s) { return s.name == shape.name; });
        if (it == shapes.end()) {
          layer.projections.push_back(std::move(w));
          continue;
        }
        const auto site_idx = static_cast<std::size_t>(it - shapes.begin());
        layer.projections.emplace_back();
        layer.site_of[p] = static_cast<int>(layer.sites.size());
        ExpertLayerSite site;
        site.base_weight = std::move(w);
        site.policy = cfg.plan.policy_at(lz);
        site.placeholder_mass = cfg.placeholder_mass;
        const int real = cfg.plan.experts[lz];
        const int ph = cfg.plan.placeholders[lz];
        const auto rank = static_cast<std::size_t>(cfg.plan.ranks[lz]);
        for (int e = 0; e < real; ++e) {
          site.experts.push_back(init_adapter(shape.n, shape.m, rank,
                                              derive_seed(seed, {0xA0, lz, site_idx, static_cast<std::uint64_t>(e)}),
                                              cfg.adapter_std));
        }
        for (int e = 0; e < ph; ++e) site.experts.push_back(make_placeholder(shape.n, shape.m));
        site.gate.weight = Matrix(static_cast<std::size_t>(real + ph), shape.m);
        site.validate();
        layer.sites.push_back(std::move(site));
      }
      m.layers_.push_back(std::move(layer));
    }
    return m;
  }

  const ToyModelConfig& config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }
  std::size_t n_layers() const { return layers_.size(); }
  const ModelLayer& layer(std::size_t l) const { return layers_.at(l); }
  ModelLayer& layer(std::size_t l) { return layers_.at(l); }
  const Matrix& embedding() const { return embedding_; }
  const Matrix& positional() const { return positional_; }
  const Matrix& head() const { return head_; }

  /// Gates and real-adapter matrices: per layer, per site, gate then (A, B) per expert.
  std::vector<Matrix*> trainable_parameters() {
    std::vector<Matrix*> out;
    for (auto& layer : layers_) {
      for (auto& site : layer.sites) {
        out.push_back(&site.gate.weight);
        for (auto& e : site.experts) {
          if (e.is_placeholder) continue;
          out.push_back(&e.a);
          out.push_back(&e.b);
        }
      }
    }
    return out;
  }

  std::size_t adapter_parameter_count() const {
    std::size_t n = 0;
    for (const auto& layer : layers_)
      for (const auto& site : layer.sites)
        for (const auto& e : site.experts) n += e.is_placeholder ? 0 : e.a.size() + e.b.size();
    return n;
  }

  std::size_t gate_parameter_count() const {
    std::size_t n = 0;
    for (const auto& layer : layers_)
      for (const auto& site : layer.sites) n += site.gate.weight.size();
    return n;
  }

  std::size_t trainable_parameter_count() const { return adapter_parameter_count() + gate_parameter_count(); }

  /// Concatenation of every frozen weight, for the frozen-base invariant.
  std::vector<double> frozen_snapshot() const {
    std::vector<double> out;
    auto put = [&out](const Matrix& m) { out.insert(out.end(), m.data().begin(), m.data().end()); };
    put(embedding_);
    put(positional_);
    put(head_);
    for (const auto& layer : layers_) {
      for (const auto& w : layer.projections) put(w);
      for (const auto& s : layer.sites) put(s.base_weight);
    }
    return out;
  }

  /// Forward pass for a batch. Every example must fit in seq_len; examples
  /// may differ in length. Rows of the logits follow the batch token order.
  ModelForward forward(Tape& t, std::span<const Example> batch) const {
    if (batch.empty()) throw ContractError("forward: empty batch");
    ModelForward out;
    std::vector<std::size_t> ids;
    std::vector<std::size_t> pos;
    std::vector<std::pair<std::size_t, std::size_t>> spans;  // (first row, length)
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const auto& ex = batch[b];
      if (ex.tokens.empty() || ex.tokens.size() > static_cast<std::size_t>(cfg_.seq_len)) {
        throw ShapeError("forward: sequence length must lie in [1, seq_len]");
      }
      if (ex.targets.size() != ex.tokens.size()) throw ShapeError("forward: targets and tokens differ in length");
      spans.emplace_back(ids.size(), ex.tokens.size());
      for (std::size_t i = 0; i < ex.tokens.size(); ++i) {
        if (ex.tokens[i] < 0 || ex.tokens[i] >= cfg_.vocab_size) throw ShapeError("forward: token id out of range");
        ids.push_back(static_cast<std::size_t>(ex.tokens[i]));
        pos.push_back(i);
        out.row_example.push_back(b);
        out.row_position.push_back(i);
      }
    }

    Var emb = t.frozen(embedding_);
    Var pe = t.frozen(positional_);
    Var head = t.frozen(head_);
    Var x = ad::add(t, ad::embedding_lookup(t, emb, ids), ad::gather_rows(t, pe, pos));

    const std::size_t heads = static_cast<std::size_t>(cfg_.n_heads);
    const std::size_t dh = static_cast<std::size_t>(cfg_.d_model) / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

    out.sites.resize(layers_.size());
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const ModelLayer& layer = layers_[l];
      std::vector<SiteBinding> binds;
      for (const auto& site : layer.sites) {
        binds.push_back(bind_site(t, site));
        const auto& bd = binds.back();
        out.parameters.push_back(bd.gate);
        for (std::size_t e = 0; e < site.experts.size(); ++e) {
          if (site.experts[e].is_placeholder) continue;
          out.parameters.push_back(bd.a[e]);
          out.parameters.push_back(bd.b[e]);
        }
      }
      out.sites[l].resize(layer.sites.size());
      auto project = [&](std::size_t p, Var in) {
        const int s = layer.site_of[p];
        if (s < 0) return ad::matmul_nt(t, in, t.frozen(layer.projections[p]));
        const auto si = static_cast<std::size_t>(s);
        SiteForward f = moe_forward_rows(t, layer.sites[si], binds[si], in);
        Var o = f.output;
        out.sites[l][si] = std::move(f);
        return o;
      };

      // Attention block.
      Var a = ad::layer_norm_rows(t, x);
      Var q = project(0, a);
      Var k = project(1, a);
      Var v = project(2, a);
      std::vector<Var> per_example;
      for (const auto& [first, len] : spans) {
        Var qe = ad::slice_rows(t, q, first, len);
        Var ke = ad::slice_rows(t, k, first, len);
        Var ve = ad::slice_rows(t, v, first, len);
        Var mask = t.constant(causal_mask(len));
        std::vector<Var> head_out;
        for (std::size_t h = 0; h < heads; ++h) {
          Var qh = ad::slice_cols(t, qe, h * dh, dh);
          Var kh = ad::slice_cols(t, ke, h * dh, dh);
          Var vh = ad::slice_cols(t, ve, h * dh, dh);
          Var scores = ad::add(t, ad::scale(t, ad::matmul_nt(t, qh, kh), inv_sqrt), mask);
          head_out.push_back(ad::matmul(t, ad::softmax_rows(t, scores), vh));
        }
        per_example.push_back(heads == 1 ? head_out.front() : ad::concat_cols(t, head_out));
      }
      Var ctx = per_example.size() == 1 ? per_example.front() : ad::concat_rows(t, per_example);
      x = ad::add(t, x, project(3, ctx));

      // Feed-forward block.
      Var f = ad::layer_norm_rows(t, x);
      Var u = ad::gelu(t, project(4, f));
      x = ad::add(t, x, project(5, u));
    }
    out.logits = ad::matmul_nt(t, ad::layer_norm_rows(t, x), head);
    return out;
  }

 private:
  static Matrix random_matrix(std::size_t r, std::size_t c, double stddev, std::uint64_t seed) {
    Matrix m(r, c);
    Rng rng(seed);
    for (double& v : m.data()) v = rng.normal(0.0, stddev);
    return m;
  }

  static Matrix causal_mask(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) m(i, j) = -1e9;
    return m;
  }

  ToyModelConfig cfg_;
  std::uint64_t seed_ = 0;
  Matrix embedding_;
  Matrix positional_;
  Matrix head_;
  std::vector<ModelLayer> layers_;
};

/// All targets of a batch, flattened in row order.
inline std::vector<int> batch_targets(std::span<const Example> batch) {
  std::vector<int> out;
  for (const auto& ex : batch) out.insert(out.end(), ex.targets.begin(), ex.targets.end());
  return out;
}

}  // namespace hilo
