#pragma once

// Budget tables comparing plans against a baseline, rendered as CSV or as an
// aligned text table.

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "hilo/allocation.hpp"

namespace hilo {

struct BudgetRow {
  std::string plan;
  std::string experts;
  std::string ranks;
  std::string placeholders;
  std::string policy;
  Ratio trainable;
  std::optional<Ratio> active_static;
  std::optional<double> active_measured;
  std::uint64_t adapter_params = 0;
  std::uint64_t gate_params = 0;
  /// Expert-count factor times rank factor, each taken against the baseline.
  Ratio multiplicative_approx;
  std::string note;

  std::string active_kind() const { return active_static ? "static" : "measured"; }
  std::optional<double> active() const {
    if (active_static) return active_static->value();
    return active_measured;
  }
};

struct BudgetReport {
  std::string baseline;
  std::vector<BudgetRow> rows;
};

/// Per-layer list as value x run-length groups, e.g. "2x8 4x8 6x8 8x8".
inline std::string describe_layers(const std::vector<int>& v) {
  std::string out;
  std::size_t i = 0;
  while (i < v.size()) {
    std::size_t j = i;
    while (j < v.size() && v[j] == v[i]) ++j;
    if (!out.empty()) out += ' ';
    out += fmt::format("{}x{}", v[i], j - i);
    i = j;
  }
  return out;
}

namespace detail {
inline Ratio weighted_ratio(const std::vector<int>& counts, const std::vector<int>& ranks,
                            const AllocationPlan& baseline) {
  std::int64_t num = 0;
  std::int64_t den = 0;
  for (std::size_t l = 0; l < counts.size(); ++l) {
    num += static_cast<std::int64_t>(counts[l]) * ranks[l];
    den += static_cast<std::int64_t>(baseline.experts[l]) * baseline.ranks[l];
  }
  return Ratio(num, den);
}
}  // namespace detail

/// One row per plan. Active units are the static TopK value; TopP plans are
/// marked "measured" and take their value from `measured` when supplied.
inline BudgetReport budget_report(const std::vector<AllocationPlan>& plans, const AllocationPlan& baseline,
                                  const std::map<std::string, double>& measured = {}) {
  BudgetReport report;
  report.baseline = fmt::format("{}: {} layers, experts {}, ranks {}, {}", baseline.name, baseline.n_layers,
                                describe_layers(baseline.experts), describe_layers(baseline.ranks),
                                baseline.policy.describe());
  for (const auto& p : plans) {
    p.validate();
    BudgetRow row;
    row.plan = p.name;
    row.experts = describe_layers(p.experts);
    row.ranks = describe_layers(p.ranks);
    row.placeholders = describe_layers(p.placeholders);
    row.policy = p.policy.describe();
    row.trainable = trainable_units_exact(p, baseline);
    if (p.policy.is_top_k()) {
      row.active_static = active_units_static_exact(p, static_cast<int>(p.policy.k), true);
    } else if (auto it = measured.find(p.name); it != measured.end()) {
      row.active_measured = it->second;
    }
    row.adapter_params = adapter_parameter_count(p);
    row.gate_params = gate_parameter_count(p);

    const Ratio count_factor = detail::weighted_ratio(p.experts, baseline.ranks, baseline);
    const Ratio rank_factor = detail::weighted_ratio(baseline.experts, p.ranks, baseline);
    row.multiplicative_approx = count_factor * rank_factor;
    if (!(row.multiplicative_approx == row.trainable)) {
      row.note = fmt::format(
          "exact count {} = {:.17g}; expert factor {} x rank factor {} = {} = {:.17g} ({:.2f}) is only the "
          "multiplicative approximation",
          row.trainable.str(), row.trainable.value(), count_factor.str(), rank_factor.str(),
          row.multiplicative_approx.str(), row.multiplicative_approx.value(), row.multiplicative_approx.value());
    }
    report.rows.push_back(std::move(row));
  }
  return report;
}

inline std::string format_double(double v) { return fmt::format("{:.17g}", v); }

inline std::string budget_csv(const BudgetReport& r) {
  std::string out =
      "plan,experts,ranks,placeholders,policy,trainable_units,trainable_exact,active_units,active_kind,"
      "adapter_params,gate_params,multiplicative_approx,note\n";
  for (const auto& row : r.rows) {
    const auto active = row.active();
    out += fmt::format("{},{},{},{},{},{},{},{},{},{},{},{},\"{}\"\n", row.plan, row.experts, row.ranks, row.placeholders,
                       row.policy, format_double(row.trainable.value()), row.trainable.str(),
                       active ? format_double(*active) : std::string(), row.active_kind(), row.adapter_params,
                       row.gate_params, format_double(row.multiplicative_approx.value()), row.note);
  }
  return out;
}

inline std::string budget_table(const BudgetReport& r) {
  std::string out = fmt::format("baseline  {}\n\n", r.baseline);
  std::size_t wp = 4, we = 7, wr = 5, wh = 12, wk = 6;
  for (const auto& row : r.rows) {
    wp = std::max(wp, row.plan.size());
    we = std::max(we, row.experts.size());
    wr = std::max(wr, row.ranks.size());
    wh = std::max(wh, row.placeholders.size());
    wk = std::max(wk, row.policy.size());
  }
  out += fmt::format("{:<{}}  {:<{}}  {:<{}}  {:<{}}  {:<{}}  {:>9}  {:>7}  {:>8}  {:>14}\n", "plan", wp, "experts", we,
                     "ranks", wr, "placeholders", wh, "policy", wk, "trainable", "active", "kind", "adapter params");
  for (const auto& row : r.rows) {
    const auto active = row.active();
    out += fmt::format("{:<{}}  {:<{}}  {:<{}}  {:<{}}  {:<{}}  {:>9.4f}  {:>7}  {:>8}  {:>14}\n", row.plan, wp,
                       row.experts, we, row.ranks, wr, row.placeholders, wh, row.policy, wk, row.trainable.value(),
                       active ? fmt::format("{:.4f}", *active) : std::string("-"), row.active_kind(),
                       row.adapter_params);
  }
  for (const auto& row : r.rows) {
    if (!row.note.empty()) out += fmt::format("\nnote [{}]: {}\n", row.plan, row.note);
  }
  return out;
}

}  // namespace hilo
