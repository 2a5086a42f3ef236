#pragma once

// Activation traces and the magnitude analyses computed from them.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "hilo/allocation.hpp"
#include "hilo/budget.hpp"
#include "hilo/model.hpp"
#include "hilo/rng.hpp"

namespace hilo {

/// One token passing one adapter site.
struct TraceEntry {
  std::size_t batch = 0;  // index of the example among the traced inputs
  std::size_t token = 0;  // position within the example
  std::size_t layer = 0;
  std::string site;
  std::size_t site_index = 0;
  int token_id = 0;
  std::vector<std::size_t> selected;  // ascending; indices >= the real count are placeholders
  std::vector<double> weights;        // renormalized, aligned with selected
  double base_linf = 0.0;
  std::vector<double> expert_linf;    // max |p_k * delta_k| per selected expert
  std::vector<double> base_output;    // W x
  std::vector<double> adapter_output; // sum over selected of p_k * delta_k
};

struct ActivationTrace {
  std::vector<TraceEntry> entries;

  void sort() {
    std::sort(entries.begin(), entries.end(), [](const TraceEntry& a, const TraceEntry& b) {
      return std::tie(a.batch, a.token, a.layer, a.site_index) < std::tie(b.batch, b.token, b.layer, b.site_index);
    });
  }

  /// Concatenate shards and restore the canonical order.
  static ActivationTrace merge(std::vector<ActivationTrace> shards) {
    ActivationTrace out;
    for (auto& s : shards)
      for (auto& e : s.entries) out.entries.push_back(std::move(e));
    out.sort();
    return out;
  }

  std::vector<std::size_t> layers() const {
    std::vector<std::size_t> out;
    for (const auto& e : entries) out.push_back(e.layer);
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
  }
};

struct TraceOptions {
  /// Keep at most this many tokens, chosen by reservoir sampling (0 keeps all).
  std::size_t max_tokens = 0;
  std::uint64_t seed = 0;
  std::size_t batch = 64;
};

namespace detail {

inline double linf(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

/// Reservoir sample of token slots; returns a per-example, per-position keep mask.
inline std::vector<std::vector<bool>> reservoir_mask(std::span<const Example> inputs, const TraceOptions& opt) {
  std::vector<std::vector<bool>> keep(inputs.size());
  std::size_t total = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    keep[i].assign(inputs[i].tokens.size(), opt.max_tokens == 0);
    total += inputs[i].tokens.size();
  }
  if (opt.max_tokens == 0 || opt.max_tokens >= total) {
    for (auto& k : keep) std::fill(k.begin(), k.end(), true);
    return keep;
  }
  Rng rng(derive_seed(opt.seed, {0x7ACE}));
  std::vector<std::pair<std::size_t, std::size_t>> reservoir;
  std::size_t seen = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t p = 0; p < inputs[i].tokens.size(); ++p, ++seen) {
      if (reservoir.size() < opt.max_tokens) {
        reservoir.emplace_back(i, p);
      } else {
        const std::size_t j = rng.below(seen + 1);
        if (j < opt.max_tokens) reservoir[j] = {i, p};
      }
    }
  }
  for (const auto& [i, p] : reservoir) keep[i][p] = true;
  return keep;
}

}  // namespace detail

/// Runs the model over `inputs` and records every (token, site) routing
/// decision. Only reads values produced by an ordinary forward pass. If
/// `logits` is given it receives the per-chunk output logits.
inline ActivationTrace record_trace(const ToyModel& model, std::span<const Example> inputs,
                                    const TraceOptions& opt = {}, std::vector<Matrix>* logits = nullptr) {
  if (inputs.empty()) throw ContractError("record_trace: no inputs");
  if (opt.batch == 0) throw ContractError("record_trace: batch must be positive");
  const auto keep = detail::reservoir_mask(inputs, opt);
  const auto shapes = model.config().site_shapes();
  ActivationTrace trace;
  for (std::size_t start = 0; start < inputs.size(); start += opt.batch) {
    const auto chunk = inputs.subspan(start, std::min(opt.batch, inputs.size() - start));
    Tape t;
    const ModelForward f = model.forward(t, chunk);
    if (logits != nullptr) logits->push_back(t.value(f.logits));
    for (std::size_t l = 0; l < f.sites.size(); ++l) {
      for (std::size_t s = 0; s < f.sites[l].size(); ++s) {
        const SiteForward& sf = f.sites[l][s];
        const Matrix& base = t.value(sf.base);
        const Matrix& adapter = t.value(sf.adapter_out);
        for (std::size_t r = 0; r < sf.routing.size(); ++r) {
          const std::size_t ex = f.row_example[r];
          const std::size_t pos = f.row_position[r];
          if (!keep[start + ex][pos]) continue;
          TraceEntry e;
          e.batch = start + ex;
          e.token = pos;
          e.layer = l;
          e.site = shapes[s].name;
          e.site_index = s;
          e.token_id = chunk[ex].tokens[pos];
          e.selected = sf.routing[r].selected;
          e.weights = sf.routing[r].weights;
          e.base_linf = detail::linf(base.row(r));
          e.expert_linf = sf.expert_linf[r];
          e.base_output.assign(base.row(r).begin(), base.row(r).end());
          e.adapter_output.assign(adapter.row(r).begin(), adapter.row(r).end());
          trace.entries.push_back(std::move(e));
        }
      }
    }
  }
  trace.sort();
  return trace;
}

/// Fraction of adapter-output element magnitudes at `layer` strictly below `threshold`.
inline double proportion_below(const ActivationTrace& trace, std::size_t layer, double threshold = 1e-3) {
  std::size_t below = 0;
  std::size_t total = 0;
  for (const auto& e : trace.entries) {
    if (e.layer != layer) continue;
    for (double v : e.adapter_output) below += std::abs(v) < threshold ? 1 : 0;
    total += e.adapter_output.size();
  }
  if (total == 0) {
    bool present = std::any_of(trace.entries.begin(), trace.entries.end(), [&](const TraceEntry& e) { return e.layer == layer; });
    if (!present) throw LookupError("proportion_below: layer " + std::to_string(layer) + " is not in the trace");
    return 1.0;
  }
  return static_cast<double>(below) / static_cast<double>(total);
}

/// Mean over (token, site) of the summed ranks of the selected real experts,
/// divided by the reference rank. Placeholders contribute nothing.
inline Ratio measure_active_units_exact(const ActivationTrace& trace, const AllocationPlan& plan) {
  if (trace.entries.empty()) throw ContractError("measure_active_units: empty trace");
  std::int64_t rank_sum = 0;
  for (const auto& e : trace.entries) {
    if (e.layer >= static_cast<std::size_t>(plan.n_layers)) {
      throw ConfigError("measure_active_units: trace layer " + std::to_string(e.layer) + " outside plan '" + plan.name + "'");
    }
    if (e.site_index >= plan.sites.size() || plan.sites[e.site_index].name != e.site) {
      throw ConfigError("measure_active_units: trace site '" + e.site + "' not in plan '" + plan.name + "'");
    }
    const auto real = static_cast<std::size_t>(plan.experts[e.layer]);
    for (std::size_t k : e.selected) {
      if (k >= static_cast<std::size_t>(plan.selectable(e.layer))) {
        throw ConfigError("measure_active_units: expert index " + std::to_string(k) + " at layer " +
                          std::to_string(e.layer) + " outside plan '" + plan.name + "'");
      }
      if (k < real) rank_sum += plan.ranks[e.layer];
    }
  }
  return Ratio(rank_sum, kReferenceRank * static_cast<std::int64_t>(trace.entries.size()));
}

inline double measure_active_units(const ActivationTrace& trace, const AllocationPlan& plan,
                                   double baseline_active = 2.0) {
  return measure_active_units_exact(trace, plan).value() * baseline_active / static_cast<double>(kReferenceTopK);
}

// ------------------------------------------------------------ histograms ----

struct HistogramSpec {
  double lo = 1e-8;
  double hi = 1e2;
  std::size_t log_bins = 50;
};

enum class MagnitudeSource { Base, Adapter };

inline std::string to_string(MagnitudeSource s) { return s == MagnitudeSource::Base ? "base" : "adapter"; }

/// Counts over |value|. Bin i covers [edges[i], edges[i+1]); the first bin
/// catches values below `lo` (including zero) and the last everything >= `hi`.
struct MagnitudeHistogram {
  std::size_t layer = 0;
  MagnitudeSource source = MagnitudeSource::Adapter;
  std::vector<double> edges;
  std::vector<std::uint64_t> counts;

  std::uint64_t total() const {
    std::uint64_t n = 0;
    for (auto c : counts) n += c;
    return n;
  }

  /// Fraction of values below each bin's upper edge.
  std::vector<double> cumulative() const {
    std::vector<double> out;
    const auto n = static_cast<double>(total());
    std::uint64_t acc = 0;
    for (std::size_t i = 0; i < counts.size(); ++i) {
      acc += counts[i];
      out.push_back(i + 1 == counts.size() ? 1.0 : static_cast<double>(acc) / n);
    }
    return out;
  }
};

inline std::vector<double> histogram_edges(const HistogramSpec& spec) {
  if (!(spec.lo > 0.0) || !(spec.hi > spec.lo) || spec.log_bins == 0) {
    throw ConfigError("histogram: need 0 < lo < hi and at least one bin");
  }
  std::vector<double> edges{0.0};
  const double a = std::log10(spec.lo);
  const double b = std::log10(spec.hi);
  for (std::size_t i = 0; i <= spec.log_bins; ++i) {
    if (i == 0) {
      edges.push_back(spec.lo);
    } else if (i == spec.log_bins) {
      edges.push_back(spec.hi);
    } else {
      edges.push_back(std::pow(10.0, a + (b - a) * static_cast<double>(i) / static_cast<double>(spec.log_bins)));
    }
  }
  edges.push_back(std::numeric_limits<double>::infinity());
  return edges;
}

inline std::size_t histogram_bin(std::span<const double> edges, double magnitude) {
  const auto it = std::upper_bound(edges.begin(), edges.end() - 1, magnitude);
  return static_cast<std::size_t>(it - edges.begin()) - 1;
}

/// Per-layer histograms for base then adapter outputs, layers ascending.
inline std::vector<MagnitudeHistogram> magnitude_histograms(const ActivationTrace& trace, const HistogramSpec& spec = {}) {
  if (trace.entries.empty()) throw ContractError("magnitude_histograms: empty trace");
  const auto edges = histogram_edges(spec);
  std::map<std::pair<std::size_t, int>, MagnitudeHistogram> by_key;
  auto add = [&](std::size_t layer, MagnitudeSource src, const std::vector<double>& values) {
    auto [it, fresh] = by_key.try_emplace({layer, static_cast<int>(src)});
    MagnitudeHistogram& h = it->second;
    if (fresh) {
      h.layer = layer;
      h.source = src;
      h.edges = edges;
      h.counts.assign(edges.size() - 1, 0);
    }
    for (double v : values) ++h.counts[histogram_bin(h.edges, std::abs(v))];
  };
  for (const auto& e : trace.entries) {
    add(e.layer, MagnitudeSource::Base, e.base_output);
    add(e.layer, MagnitudeSource::Adapter, e.adapter_output);
  }
  std::vector<MagnitudeHistogram> out;
  for (auto& [k, h] : by_key) out.push_back(std::move(h));
  return out;
}

// ----------------------------------------------------------------- output ----

inline nlohmann::json to_json(const TraceEntry& e) {
  return {{"batch", e.batch},
          {"token", e.token},
          {"layer", e.layer},
          {"site", e.site},
          {"site_index", e.site_index},
          {"token_id", e.token_id},
          {"selected", e.selected},
          {"weights", e.weights},
          {"base_linf", e.base_linf},
          {"expert_linf", e.expert_linf},
          {"base_output", e.base_output},
          {"adapter_output", e.adapter_output}};
}

inline TraceEntry trace_entry_from_json(const nlohmann::json& j) {
  TraceEntry e;
  e.batch = j.at("batch").get<std::size_t>();
  e.token = j.at("token").get<std::size_t>();
  e.layer = j.at("layer").get<std::size_t>();
  e.site = j.at("site").get<std::string>();
  e.site_index = j.at("site_index").get<std::size_t>();
  e.token_id = j.at("token_id").get<int>();
  e.selected = j.at("selected").get<std::vector<std::size_t>>();
  e.weights = j.at("weights").get<std::vector<double>>();
  e.base_linf = j.at("base_linf").get<double>();
  e.expert_linf = j.at("expert_linf").get<std::vector<double>>();
  e.base_output = j.at("base_output").get<std::vector<double>>();
  e.adapter_output = j.at("adapter_output").get<std::vector<double>>();
  return e;
}

inline void write_trace_jsonl(std::ostream& os, const ActivationTrace& trace) {
  for (const auto& e : trace.entries) os << to_json(e).dump() << '\n';
}

inline void write_proportions_csv(std::ostream& os, const ActivationTrace& trace, std::span<const double> thresholds) {
  os << "layer,threshold,proportion\n";
  for (std::size_t l : trace.layers()) {
    for (double th : thresholds) {
      os << l << ',' << format_double(th) << ',' << format_double(proportion_below(trace, l, th)) << '\n';
    }
  }
}

inline void write_histograms_csv(std::ostream& os, const std::vector<MagnitudeHistogram>& hists) {
  os << "layer,source,bin,lower,upper,count,cumulative\n";
  for (const auto& h : hists) {
    const auto cum = h.cumulative();
    for (std::size_t i = 0; i < h.counts.size(); ++i) {
      os << h.layer << ',' << to_string(h.source) << ',' << i << ',' << format_double(h.edges[i]) << ','
         << format_double(h.edges[i + 1]) << ',' << h.counts[i] << ',' << format_double(cum[i]) << '\n';
    }
  }
}

struct ActiveUnitsRow {
  std::string plan;
  std::string policy;
  Ratio measured;
  std::optional<Ratio> static_bound;  // Top-K only
  std::size_t entries = 0;
  double baseline_active = 2.0;
};

inline void write_active_units_csv(std::ostream& os, const std::vector<ActiveUnitsRow>& rows) {
  os << "plan,policy,entries,measured_units,measured_exact,static_units,static_exact\n";
  for (const auto& r : rows) {
    const double scale = r.baseline_active / static_cast<double>(kReferenceTopK);
    os << r.plan << ',' << r.policy << ',' << r.entries << ',' << format_double(r.measured.value() * scale) << ','
       << r.measured.str() << ',';
    if (r.static_bound) {
      os << format_double(r.static_bound->value() * scale) << ',' << r.static_bound->str();
    } else {
      os << ',';
    }
    os << '\n';
  }
}

}  // namespace hilo
