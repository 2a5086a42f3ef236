#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hilo/autodiff.hpp"
#include "hilo/model.hpp"
#include "hilo/rng.hpp"
#include "hilo/tasks.hpp"

namespace hilo {

struct TrainHyper {
  // Adapters start at B = 0 with A of std 0.02, so the first updates are tiny;
  // these defaults learn token copy on the default toy geometry in 2k steps.
  double lr = 0.5;
  double momentum = 0.9;
  std::size_t steps = 2000;
  std::size_t batch = 16;
  /// Switch-style balance term: n_experts * sum_e mean_prob_e * load_fraction_e, averaged over sites.
  double aux_load_balance = 0.0;
  /// Expected number of real experts among the selected ones, averaged over tokens and sites.
  double aux_active_count = 0.0;
  /// Evaluate every this many steps (0: only after the last step).
  std::size_t eval_every = 0;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("train: lr must be finite and >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train: momentum must lie in [0, 1)");
    if (batch == 0) throw ConfigError("train: batch must be positive");
    if (aux_load_balance < 0.0 || aux_active_count < 0.0) throw ConfigError("train: aux coefficients must be >= 0");
  }
};

struct TrainRecord {
  std::size_t step = 0;  // 1-based optimizer step that produced this loss
  double loss = 0.0;     // task loss + aux terms
  double task_loss = 0.0;
  double aux_load_balance = 0.0;
  double aux_active_count = 0.0;
  std::optional<double> eval_loss;
  std::optional<double> eval_accuracy;
  double wall_time = 0.0;  // seconds since train() started; kept out of persisted records
};

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
};

/// Optimizer state that must survive a checkpoint for exact resumption.
struct TrainState {
  std::size_t step = 0;
  std::vector<Matrix> velocity;  // empty unless momentum > 0
};

struct TrainResult {
  std::vector<TrainRecord> records;
  bool diverged = false;
  std::string diagnostic;
};

/// Mean loss and token accuracy over labelled positions; argmax over the first n_classes logits.
inline EvalResult evaluate(const ToyModel& model, std::span<const Example> examples, std::size_t n_classes,
                           std::size_t batch = 64) {
  if (examples.empty()) throw ContractError("evaluate: no examples");
  double loss_sum = 0.0;
  std::size_t labelled = 0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < examples.size(); start += batch) {
    const auto chunk = examples.subspan(start, std::min(batch, examples.size() - start));
    Tape t;
    const ModelForward f = model.forward(t, chunk);
    const auto targets = batch_targets(chunk);
    const Matrix& z = t.value(f.logits);
    for (std::size_t r = 0; r < targets.size(); ++r) {
      if (targets[r] < 0) continue;
      const auto row = z.row(r).first(n_classes);
      const auto p = softmax(row);
      loss_sum += -std::log(p[static_cast<std::size_t>(targets[r])]);
      const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
      correct += best == static_cast<std::size_t>(targets[r]) ? 1 : 0;
      ++labelled;
    }
  }
  if (labelled == 0) throw ContractError("evaluate: no labelled positions");
  return {loss_sum / static_cast<double>(labelled), static_cast<double>(correct) / static_cast<double>(labelled)};
}

inline EvalResult evaluate(const ToyModel& model, const Dataset& ds, std::size_t batch = 64) {
  return evaluate(model, ds.eval, ds.n_classes, batch);
}

/// Auxiliary routing losses over every site of a forward pass.
struct AuxTerms {
  std::optional<Var> load_balance;
  std::optional<Var> active_count;
};

inline AuxTerms routing_aux_terms(Tape& t, const ToyModel& model, const ModelForward& f, bool want_balance,
                                  bool want_count) {
  AuxTerms out;
  std::vector<Var> balance;
  std::vector<Var> count;
  for (std::size_t l = 0; l < f.sites.size(); ++l) {
    for (std::size_t s = 0; s < f.sites[l].size(); ++s) {
      const SiteForward& sf = f.sites[l][s];
      const ExpertLayerSite& site = model.layer(l).sites[s];
      const std::size_t rows = sf.routing.size();
      const std::size_t n_exp = site.experts.size();
      if (want_balance) {
        Matrix load(n_exp, 1);
        for (const auto& r : sf.routing)
          for (std::size_t k : r.selected) load(k, 0) += 1.0 / static_cast<double>(rows);
        Var imp = ad::mean_rows(t, sf.probs);
        balance.push_back(ad::scale(t, ad::matmul(t, imp, t.constant(std::move(load))), static_cast<double>(n_exp)));
      }
      if (want_count) {
        Matrix w(rows, n_exp);
        for (std::size_t r = 0; r < rows; ++r) {
          const auto k = static_cast<double>(sf.routing[r].selected.size());
          for (std::size_t e = 0; e < n_exp; ++e) w(r, e) = site.experts[e].is_placeholder ? 0.0 : k;
        }
        count.push_back(ad::scale(t, ad::sum(t, ad::mul(t, sf.probs, t.constant(std::move(w)))),
                                  1.0 / static_cast<double>(rows)));
      }
    }
  }
  auto average = [&t](const std::vector<Var>& v) {
    Var acc = v.front();
    for (std::size_t i = 1; i < v.size(); ++i) acc = ad::add(t, acc, v[i]);
    return ad::scale(t, acc, 1.0 / static_cast<double>(v.size()));
  };
  if (!balance.empty()) out.load_balance = average(balance);
  if (!count.empty()) out.active_count = average(count);
  return out;
}

/// Indices of the examples used at a given step; depends only on (seed, step).
inline std::vector<std::size_t> batch_indices(std::uint64_t seed, std::size_t step, std::size_t n, std::size_t batch) {
  Rng rng(derive_seed(seed, {0xBA7C, step}));
  std::vector<std::size_t> idx;
  if (batch >= n) {
    for (std::size_t i = 0; i < n; ++i) idx.push_back(i);
    return idx;
  }
  // Partial Fisher-Yates over a lazily materialized permutation.
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  for (std::size_t i = 0; i < batch; ++i) {
    const std::size_t j = i + rng.below(n - i);
    std::swap(perm[i], perm[j]);
    idx.push_back(perm[i]);
  }
  return idx;
}

/// SGD (optionally with momentum) on gates and adapters. Continues from
/// `state.step` up to `hyper.steps`. `on_record` sees each record as it is made.
inline TrainResult train(ToyModel& model, const Dataset& ds, const TrainHyper& hyper, TrainState& state,
                         const std::function<void(const TrainRecord&)>& on_record = {}) {
  hyper.validate();
  if (ds.train.empty()) throw ConfigError("train: empty training split");
  auto params = model.trainable_parameters();
  if (hyper.momentum > 0.0 && state.velocity.empty()) {
    for (const Matrix* p : params) state.velocity.emplace_back(p->rows(), p->cols());
  }
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult result;
  while (state.step < hyper.steps) {
    const std::size_t step = state.step + 1;
    const auto idx = batch_indices(hyper.seed, step, ds.train.size(), hyper.batch);
    std::vector<Example> batch;
    batch.reserve(idx.size());
    for (std::size_t i : idx) batch.push_back(ds.train[i]);

    Tape t;
    ModelForward f;
    try {
      f = model.forward(t, batch);
    } catch (const NumericError& e) {
      result.diverged = true;
      result.diagnostic = "non-finite activations at step " + std::to_string(step) + ": " + e.what();
      return result;
    }
    Var task_loss = ad::cross_entropy(t, f.logits, batch_targets(batch), ds.n_classes);
    Var loss = task_loss;
    TrainRecord rec;
    rec.step = step;
    rec.task_loss = t.value(task_loss)(0, 0);
    const AuxTerms aux = routing_aux_terms(t, model, f, hyper.aux_load_balance > 0.0, hyper.aux_active_count > 0.0);
    if (aux.load_balance) {
      rec.aux_load_balance = t.value(*aux.load_balance)(0, 0);
      loss = ad::add(t, loss, ad::scale(t, *aux.load_balance, hyper.aux_load_balance));
    }
    if (aux.active_count) {
      rec.aux_active_count = t.value(*aux.active_count)(0, 0);
      loss = ad::add(t, loss, ad::scale(t, *aux.active_count, hyper.aux_active_count));
    }
    rec.loss = t.value(loss)(0, 0);

    if (!std::isfinite(rec.loss)) {
      result.diverged = true;
      result.diagnostic = "non-finite loss at step " + std::to_string(step) + " (task loss " +
                          std::to_string(rec.task_loss) + ")";
      rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      result.records.push_back(rec);
      if (on_record) on_record(rec);
      return result;
    }

    const Gradients grads = t.backward(loss);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Matrix* g = grads.get(f.parameters[i]);
      if (hyper.momentum > 0.0) {
        Matrix& v = state.velocity[i];
        for (double& x : v.data()) x *= hyper.momentum;
        if (g != nullptr) axpy(1.0, *g, v);
        axpy(-hyper.lr, v, *params[i]);
      } else if (g != nullptr) {
        axpy(-hyper.lr, *g, *params[i]);
      }
    }
    state.step = step;

    for (const Matrix* p : params) {
      if (std::all_of(p->data().begin(), p->data().end(), [](double v) { return std::isfinite(v); })) continue;
      result.diverged = true;
      result.diagnostic = "non-finite parameters after step " + std::to_string(step) + " (loss " +
                          std::to_string(rec.loss) + ")";
      rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      result.records.push_back(rec);
      if (on_record) on_record(rec);
      return result;
    }

    const bool last = step == hyper.steps;
    if (last || (hyper.eval_every > 0 && step % hyper.eval_every == 0)) {
      const EvalResult ev = evaluate(model, ds);
      rec.eval_loss = ev.loss;
      rec.eval_accuracy = ev.accuracy;
    }
    rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.records.push_back(rec);
    if (on_record) on_record(rec);
  }
  return result;
}

inline TrainResult train(ToyModel& model, const Dataset& ds, const TrainHyper& hyper) {
  TrainState state;
  return train(model, ds, hyper, state);
}

}  // namespace hilo
