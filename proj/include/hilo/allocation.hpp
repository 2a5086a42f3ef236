#pragma once

// Layer-wise expert counts and adapter ranks, and the parameter accounting
// that compares plans in "units" of a vanilla baseline.
//
// Layer indices are 1-based in the rank schedule (matching the usual way the
// schedule is written) and 0-based everywhere else.

#include <algorithm>
#include <cstdint>
#include <memory>
#include <numeric>
#include <string>
#include <variant>
#include <vector>

#include "hilo/errors.hpp"
#include "hilo/gating.hpp"

namespace hilo {

/// Exact non-negative rational, always reduced.
struct Ratio {
  std::int64_t num = 0;
  std::int64_t den = 1;

  Ratio() = default;
  Ratio(std::int64_t n, std::int64_t d) : num(n), den(d) {
    if (den == 0) throw ContractError("Ratio: zero denominator");
    if (den < 0) {
      num = -num;
      den = -den;
    }
    const std::int64_t g = std::gcd(num < 0 ? -num : num, den);
    if (g > 1) {
      num /= g;
      den /= g;
    }
  }

  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  bool operator==(const Ratio&) const = default;
  std::string str() const { return std::to_string(num) + "/" + std::to_string(den); }
};

inline Ratio operator*(const Ratio& a, const Ratio& b) { return Ratio(a.num * b.num, a.den * b.den); }

// ---------------------------------------------------------------- ranks ----

enum class SnapMode { Verbatim, MultiplesOf2, PowersOf2, Explicit };

inline std::string to_string(SnapMode m) {
  switch (m) {
    case SnapMode::Verbatim: return "verbatim";
    case SnapMode::MultiplesOf2: return "multiples_of_2";
    case SnapMode::PowersOf2: return "powers_of_2";
    case SnapMode::Explicit: return "explicit";
  }
  return "?";
}

inline SnapMode snap_mode_from_string(const std::string& s) {
  if (s == "verbatim") return SnapMode::Verbatim;
  if (s == "multiples_of_2") return SnapMode::MultiplesOf2;
  if (s == "powers_of_2") return SnapMode::PowersOf2;
  if (s == "explicit") return SnapMode::Explicit;
  throw ConfigError("unknown snap mode '" + s + "'");
}

/// Smallest even number >= r.
inline int snap_multiple_of_2(int r) { return r % 2 == 0 ? r : r + 1; }

/// Nearest power of two, ties toward the larger one.
inline int snap_power_of_2(int r) {
  if (r <= 1) return 1;
  int lo = 1;
  while (lo * 2 <= r) lo *= 2;
  if (lo == r) return r;
  const int hi = lo * 2;
  return (r - lo) < (hi - r) ? lo : hi;
}

/// r_i = r_min + floor((r_max - r_min) / ceil(n / l)) * floor((i - 1) / l),
/// followed by an optional snap.
struct RankSchedule {
  int r_min = 2;
  int r_max = 8;
  int n_layers = 32;
  int group_size = 8;
  SnapMode snap = SnapMode::Verbatim;
  /// Explicit mode only: one rank per layer, or one per group of `group_size` layers.
  std::vector<int> explicit_ranks;

  int n_groups() const { return (n_layers + group_size - 1) / group_size; }

  void validate() const {
    if (r_min < 1 || r_max < 1) throw ConfigError("rank schedule: ranks must be positive");
    if (r_min > r_max) throw ConfigError("rank schedule: r_min exceeds r_max");
    if (n_layers < 1) throw ConfigError("rank schedule: n_layers must be positive");
    if (group_size < 1 || group_size > n_layers) throw ConfigError("rank schedule: group size must lie in [1, n_layers]");
    if (snap == SnapMode::Explicit) {
      const auto len = static_cast<int>(explicit_ranks.size());
      if (len != n_layers && len != n_groups()) {
        throw ConfigError("rank schedule: explicit list has " + std::to_string(len) + " entries, expected " +
                          std::to_string(n_layers) + " (per layer) or " + std::to_string(n_groups()) + " (per group)");
      }
      if (std::any_of(explicit_ranks.begin(), explicit_ranks.end(), [](int r) { return r < 1; })) {
        throw ConfigError("rank schedule: explicit ranks must be >= 1");
      }
    }
  }
};

/// The unsnapped formula value at layer i (1-based).
inline int rank_formula(const RankSchedule& s, int i) {
  const int step = (s.r_max - s.r_min) / s.n_groups();
  return s.r_min + step * ((i - 1) / s.group_size);
}

inline int rank_schedule_eval(const RankSchedule& s, int i) {
  s.validate();
  if (i < 1 || i > s.n_layers) {
    throw ConfigError("rank schedule: layer " + std::to_string(i) + " outside [1, " + std::to_string(s.n_layers) + "]");
  }
  switch (s.snap) {
    case SnapMode::Verbatim: return rank_formula(s, i);
    case SnapMode::MultiplesOf2: return snap_multiple_of_2(rank_formula(s, i));
    case SnapMode::PowersOf2: return snap_power_of_2(rank_formula(s, i));
    case SnapMode::Explicit:
      if (static_cast<int>(s.explicit_ranks.size()) == s.n_layers) return s.explicit_ranks[static_cast<std::size_t>(i - 1)];
      return s.explicit_ranks[static_cast<std::size_t>((i - 1) / s.group_size)];
  }
  return 0;
}

inline std::vector<int> resolve_ranks(const RankSchedule& s) {
  s.validate();
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(s.n_layers));
  for (int i = 1; i <= s.n_layers; ++i) out.push_back(rank_schedule_eval(s, i));
  return out;
}

/// Explicit per-group values, e.g. {2, 4, 6, 8} every 8 layers.
inline RankSchedule grouped_ranks(std::vector<int> per_group, int n_layers, int group_size) {
  RankSchedule s;
  s.r_min = *std::min_element(per_group.begin(), per_group.end());
  s.r_max = *std::max_element(per_group.begin(), per_group.end());
  s.n_layers = n_layers;
  s.group_size = group_size;
  s.snap = SnapMode::Explicit;
  s.explicit_ranks = std::move(per_group);
  return s;
}

// ------------------------------------------------------- expert counts ----

/// Per-layer expert counts published for AlphaLoRA on a 32-layer model.
/// The published list has 37 entries; it is kept exactly as published.
inline const std::vector<int>& alphalora_published_counts() {
  static const std::vector<int> counts = {1, 3, 4, 4, 4, 4, 4, 3, 3, 3, 3, 3, 2, 2, 3, 3, 3, 3, 3,
                                          4, 4, 5, 5, 7, 6, 8, 9, 8, 7, 8, 6, 6, 8, 7, 7, 9, 5};
  return counts;
}

struct ExpertAllocation;

namespace alloc {
struct Uniform {
  int experts = 8;
};
/// values[g] experts for every layer of group g. group_size 0 means ceil(n / values.size()).
struct Grouped {
  std::vector<int> values;
  int group_size = 0;
};
/// A verbatim per-layer list. Lenient mode truncates a longer list.
struct Explicit {
  std::vector<int> counts;
  bool lenient = false;
};
/// round_half_up(rank_i / reference_rank * base_i), at least 1.
struct RankScaled {
  std::shared_ptr<const ExpertAllocation> base;
  std::vector<int> ranks;
  int reference_rank = 8;
};
}  // namespace alloc

struct ExpertAllocation {
  std::variant<alloc::Uniform, alloc::Grouped, alloc::Explicit, alloc::RankScaled> strategy;

  static ExpertAllocation uniform(int e) { return {alloc::Uniform{e}}; }
  static ExpertAllocation grouped(std::vector<int> values, int group_size = 0) {
    return {alloc::Grouped{std::move(values), group_size}};
  }
  static ExpertAllocation explicit_list(std::vector<int> counts, bool lenient = false) {
    return {alloc::Explicit{std::move(counts), lenient}};
  }
  static ExpertAllocation alphalora(bool lenient = false) { return explicit_list(alphalora_published_counts(), lenient); }
  static ExpertAllocation rank_scaled(ExpertAllocation base, std::vector<int> ranks, int reference_rank = 8) {
    return {alloc::RankScaled{std::make_shared<const ExpertAllocation>(std::move(base)), std::move(ranks), reference_rank}};
  }
};

inline std::vector<int> resolve_allocation(const ExpertAllocation& a, int n_layers) {
  if (n_layers < 1) throw ConfigError("allocation: n_layers must be positive");
  const auto n = static_cast<std::size_t>(n_layers);
  std::vector<int> out;
  if (const auto* u = std::get_if<alloc::Uniform>(&a.strategy)) {
    out.assign(n, u->experts);
  } else if (const auto* g = std::get_if<alloc::Grouped>(&a.strategy)) {
    if (g->values.empty()) throw ConfigError("grouped allocation: no values");
    const int gs = g->group_size > 0 ? g->group_size
                                     : (n_layers + static_cast<int>(g->values.size()) - 1) / static_cast<int>(g->values.size());
    const int groups = (n_layers + gs - 1) / gs;
    if (groups != static_cast<int>(g->values.size())) {
      throw ConfigError("grouped allocation: " + std::to_string(g->values.size()) + " values for " +
                        std::to_string(groups) + " groups of " + std::to_string(gs) + " layers");
    }
    for (int i = 0; i < n_layers; ++i) out.push_back(g->values[static_cast<std::size_t>(i / gs)]);
  } else if (const auto* e = std::get_if<alloc::Explicit>(&a.strategy)) {
    if (e->counts.size() == n || (e->lenient && e->counts.size() > n)) {
      out.assign(e->counts.begin(), e->counts.begin() + n_layers);
    } else {
      throw ConfigError("explicit allocation: list has " + std::to_string(e->counts.size()) + " entries for " +
                        std::to_string(n_layers) + " layers" + (e->counts.size() > n ? " (strict mode)" : ""));
    }
  } else {
    const auto& rs = std::get<alloc::RankScaled>(a.strategy);
    if (!rs.base) throw ConfigError("rank-scaled allocation: missing base");
    if (rs.ranks.size() != n) {
      throw ConfigError("rank-scaled allocation: " + std::to_string(rs.ranks.size()) + " ranks for " +
                        std::to_string(n_layers) + " layers");
    }
    if (rs.reference_rank < 1) throw ConfigError("rank-scaled allocation: reference rank must be positive");
    const auto base = resolve_allocation(*rs.base, n_layers);
    for (std::size_t i = 0; i < n; ++i) {
      // floor(r * b / R + 1/2) in integers.
      const int scaled = (2 * rs.ranks[i] * base[i] + rs.reference_rank) / (2 * rs.reference_rank);
      out.push_back(std::max(1, scaled));
    }
  }
  for (int c : out) {
    if (c < 1) throw ConfigError("allocation: every layer needs at least one expert");
  }
  return out;
}

// ----------------------------------------------------------------- plans ----

/// One adapted weight matrix per layer: out_dim x in_dim.
struct SiteShape {
  std::string name;
  std::size_t n = 0;  // out
  std::size_t m = 0;  // in
  bool operator==(const SiteShape&) const = default;
};

struct AllocationPlan {
  std::string name;
  int n_layers = 0;
  std::vector<int> experts;       // real experts per layer
  std::vector<int> ranks;         // adapter rank per layer
  std::vector<int> placeholders;  // parameterless experts per layer
  ActivationPolicy policy = ActivationPolicy::top_k(2);
  std::vector<SiteShape> sites;   // the same sites exist in every layer

  int selectable(std::size_t layer) const { return experts[layer] + placeholders[layer]; }

  /// The policy as applied at one layer: a Top-K layer with fewer than K
  /// selectable experts activates all of them.
  ActivationPolicy policy_at(std::size_t layer) const {
    if (!policy.is_top_k()) return policy;
    return ActivationPolicy::top_k(std::min(policy.k, static_cast<std::size_t>(selectable(layer))));
  }

  void validate() const {
    const auto n = static_cast<std::size_t>(n_layers);
    if (n_layers < 1) throw ConfigError("plan '" + name + "': n_layers must be positive");
    if (experts.size() != n || ranks.size() != n || placeholders.size() != n) {
      throw ConfigError("plan '" + name + "': per-layer lists must have n_layers entries");
    }
    if (sites.empty()) throw ConfigError("plan '" + name + "': no adapter sites");
    for (std::size_t l = 0; l < n; ++l) {
      if (experts[l] < 1) throw ConfigError("plan '" + name + "': layer " + std::to_string(l + 1) + " has no experts");
      if (ranks[l] < 1) throw ConfigError("plan '" + name + "': layer " + std::to_string(l + 1) + " rank < 1");
      if (placeholders[l] < 0) throw ConfigError("plan '" + name + "': negative placeholder count");
      for (const auto& s : sites) {
        if (static_cast<std::size_t>(ranks[l]) > std::min(s.n, s.m)) {
          throw ConfigError("plan '" + name + "': rank " + std::to_string(ranks[l]) + " exceeds site " + s.name);
        }
      }
      policy_at(l).validate(static_cast<std::size_t>(selectable(l)));
    }
    if (policy.is_top_k()) {
      int widest = 0;
      for (std::size_t l = 0; l < n; ++l) widest = std::max(widest, selectable(l));
      if (policy.k > static_cast<std::size_t>(widest)) {
        throw ConfigError("plan '" + name + "': K=" + std::to_string(policy.k) + " exceeds every layer's expert count");
      }
    }
  }
};

inline AllocationPlan make_plan(std::string name, std::vector<SiteShape> sites, std::vector<int> experts,
                                std::vector<int> ranks, std::vector<int> placeholders, ActivationPolicy policy) {
  AllocationPlan p;
  p.name = std::move(name);
  p.n_layers = static_cast<int>(experts.size());
  p.experts = std::move(experts);
  p.ranks = std::move(ranks);
  p.placeholders = placeholders.empty() ? std::vector<int>(static_cast<std::size_t>(p.n_layers), 0) : std::move(placeholders);
  p.policy = policy;
  p.sites = std::move(sites);
  p.validate();
  return p;
}

/// Geometry of the vanilla reference configuration: every layer carries the
/// same number of experts at the same rank and activates top_k of them.
struct BaselineGeometry {
  int n_layers = 32;
  int experts = 8;
  int rank = 8;
  int top_k = 2;
  std::vector<SiteShape> sites = {{"proj", 4096, 4096}};

  AllocationPlan plan(std::string name = "vanilla") const {
    const auto n = static_cast<std::size_t>(n_layers);
    return make_plan(std::move(name), sites, std::vector<int>(n, experts), std::vector<int>(n, rank),
                     std::vector<int>(n, 0), ActivationPolicy::top_k(static_cast<std::size_t>(top_k)));
  }
};

// ------------------------------------------------------------ accounting ----

/// Trainable adapter parameters: sum over layers and sites of experts * rank * (n + m).
inline std::uint64_t adapter_parameter_count(const AllocationPlan& p) {
  std::uint64_t total = 0;
  for (std::size_t l = 0; l < p.experts.size(); ++l)
    for (const auto& s : p.sites)
      total += static_cast<std::uint64_t>(p.experts[l]) * static_cast<std::uint64_t>(p.ranks[l]) * (s.n + s.m);
  return total;
}

/// Gate parameters: one (real + placeholder) x m matrix per site. Not part of the units.
inline std::uint64_t gate_parameter_count(const AllocationPlan& p) {
  std::uint64_t total = 0;
  for (std::size_t l = 0; l < p.experts.size(); ++l)
    for (const auto& s : p.sites) total += static_cast<std::uint64_t>(p.selectable(l)) * s.m;
  return total;
}

inline void require_same_geometry(const AllocationPlan& a, const AllocationPlan& b) {
  if (a.n_layers != b.n_layers) {
    throw ConfigError("plan '" + a.name + "' has " + std::to_string(a.n_layers) + " layers, baseline '" + b.name +
                      "' has " + std::to_string(b.n_layers));
  }
  if (a.sites != b.sites) throw ConfigError("plan '" + a.name + "' adapts different sites than baseline '" + b.name + "'");
}

inline Ratio trainable_units_exact(const AllocationPlan& plan, const AllocationPlan& baseline) {
  require_same_geometry(plan, baseline);
  const auto base = adapter_parameter_count(baseline);
  if (base == 0) throw ConfigError("baseline has no trainable adapter parameters");
  return Ratio(static_cast<std::int64_t>(adapter_parameter_count(plan)), static_cast<std::int64_t>(base));
}

inline double trainable_units(const AllocationPlan& plan, const AllocationPlan& baseline) {
  return trainable_units_exact(plan, baseline).value();
}

inline constexpr int kReferenceRank = 8;
inline constexpr int kReferenceTopK = 2;

/// Static active units under TopK(k): mean over layers of min(k, real experts) * rank,
/// scaled so k = 2 at rank 8 everywhere gives 2. With `clamp`, a layer with
/// fewer than k selectable experts counts all of them instead of being an error.
inline Ratio active_units_static_exact(const AllocationPlan& plan, int k, bool clamp = false) {
  std::int64_t acc = 0;
  if (k < 1) throw ConfigError("active units: K must be positive");
  for (std::size_t l = 0; l < plan.experts.size(); ++l) {
    if (!clamp && k > plan.selectable(l)) {
      throw ConfigError("active units: K=" + std::to_string(k) + " exceeds the " + std::to_string(plan.selectable(l)) +
                        " experts of layer " + std::to_string(l + 1) + " in plan '" + plan.name + "'");
    }
    acc += static_cast<std::int64_t>(std::min(k, plan.experts[l])) * plan.ranks[l];
  }
  return Ratio(acc * kReferenceTopK, static_cast<std::int64_t>(plan.n_layers) * kReferenceTopK * kReferenceRank);
}

inline double active_units_static(const AllocationPlan& plan, int k, double baseline_active = 2.0) {
  return active_units_static_exact(plan, k).value() * baseline_active / 2.0;
}

// -------------------------------------------------------------- presets ----

/// Named plans at a baseline geometry. Group patterns assume four groups.
///   vanilla      8 experts, rank 8
///   mola         experts 2/4/6/8 per group, rank 8
///   alphalora    published per-layer counts, rank 8
///   hilo         8 experts, ranks 2/4/6/8 per group
///   hilo_mola    experts 2/4/6/8 and ranks 2/4/6/8
///   hilo_alphalora  round(rank/8 * alphalora), ranks 2/4/6/8
///   adamoe       8 experts + 8 placeholders, rank 8
///   hilo_adamoe  8 experts + 8 placeholders, ranks 2/4/6/8
///   mix          experts and placeholders 2/4/6/8, rank 8
///   hilo_mix     experts and placeholders 2/4/6/8, ranks 2/4/6/8
inline std::vector<std::string> preset_names() {
  return {"vanilla", "mola", "alphalora", "hilo", "hilo_mola", "hilo_alphalora",
          "adamoe", "hilo_adamoe", "mix", "hilo_mix"};
}

inline AllocationPlan preset_plan(const std::string& name, const BaselineGeometry& g, bool lenient_alphalora = false) {
  const int n = g.n_layers;
  const auto nz = static_cast<std::size_t>(n);
  const std::vector<int> pattern = {2, 4, 6, 8};
  const auto policy = ActivationPolicy::top_k(static_cast<std::size_t>(g.top_k));
  const auto uniform_ranks = std::vector<int>(nz, g.rank);
  const int group = (n + static_cast<int>(pattern.size()) - 1) / static_cast<int>(pattern.size());
  const auto hier_ranks = resolve_ranks(grouped_ranks(pattern, n, group));
  const auto grouped_counts = resolve_allocation(ExpertAllocation::grouped(pattern), n);
  const auto uniform_counts = std::vector<int>(nz, g.experts);
  const std::vector<int> none;

  if (name == "vanilla") return make_plan(name, g.sites, uniform_counts, uniform_ranks, none, policy);
  if (name == "mola") return make_plan(name, g.sites, grouped_counts, uniform_ranks, none, policy);
  if (name == "alphalora") {
    return make_plan(name, g.sites, resolve_allocation(ExpertAllocation::alphalora(lenient_alphalora), n), uniform_ranks,
                     none, policy);
  }
  if (name == "hilo") return make_plan(name, g.sites, uniform_counts, hier_ranks, none, policy);
  if (name == "hilo_mola") return make_plan(name, g.sites, grouped_counts, hier_ranks, none, policy);
  if (name == "hilo_alphalora") {
    auto counts = resolve_allocation(
        ExpertAllocation::rank_scaled(ExpertAllocation::alphalora(lenient_alphalora), hier_ranks, kReferenceRank), n);
    return make_plan(name, g.sites, counts, hier_ranks, none, policy);
  }
  if (name == "adamoe") return make_plan(name, g.sites, uniform_counts, uniform_ranks, uniform_counts, policy);
  if (name == "hilo_adamoe") return make_plan(name, g.sites, uniform_counts, hier_ranks, uniform_counts, policy);
  if (name == "mix") return make_plan(name, g.sites, grouped_counts, uniform_ranks, grouped_counts, policy);
  if (name == "hilo_mix") return make_plan(name, g.sites, grouped_counts, hier_ranks, grouped_counts, policy);
  throw ConfigError("unknown strategy '" + name + "'");
}

/// Plan whose per-group ranks are the digits of `code` (e.g. "2468"),
/// with `experts` per layer.
inline AllocationPlan rank_code_plan(const std::string& code, const BaselineGeometry& g, const ExpertAllocation& experts) {
  if (code.empty()) throw ConfigError("rank code: empty");
  std::vector<int> per_group;
  for (char c : code) {
    if (c < '1' || c > '9') throw ConfigError("rank code '" + code + "': digits 1-9 only");
    per_group.push_back(c - '0');
  }
  const int n = g.n_layers;
  const int groups = static_cast<int>(per_group.size());
  const auto ranks = resolve_ranks(grouped_ranks(per_group, n, (n + groups - 1) / groups));
  return make_plan("ranks_" + code, g.sites, resolve_allocation(experts, g.n_layers), ranks, {},
                   ActivationPolicy::top_k(static_cast<std::size_t>(g.top_k)));
}

}  // namespace hilo
