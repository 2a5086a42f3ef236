#pragma once

// YAML run configuration for the hilo command-line tool. Every diagnostic is
// anchored to the offending key as file:line:col, or to the --set flag that
// supplied it.

#include <yaml-cpp/yaml.h>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "hilo/instrumentation.hpp"
#include "hilo/serialization.hpp"

namespace hilo::cli {

struct Source {
  std::string file;
  std::set<std::string> overridden;
};

class Node {
 public:
  Node(YAML::Node node, std::string path, const Source* src) : node_(std::move(node)), path_(std::move(path)), src_(src) {}

  const std::string& path() const { return path_; }
  bool defined() const { return node_.IsDefined() && !node_.IsNull(); }

  std::string where() const {
    for (const auto& o : src_->overridden) {
      if (path_ == o || path_.rfind(o + ".", 0) == 0 || path_.rfind(o + "[", 0) == 0) return "--set " + o;
    }
    if (!node_.IsDefined()) return src_->file;
    const auto mark = node_.Mark();
    if (mark.is_null()) return src_->file;
    return src_->file + ":" + std::to_string(mark.line + 1) + ":" + std::to_string(mark.column + 1);
  }

  [[noreturn]] void fail(const std::string& msg) const {
    throw ConfigError(where() + ": " + (path_.empty() ? std::string("config") : path_) + ": " + msg);
  }

  Node child(const std::string& key) const {
    if (defined() && !node_.IsMap()) fail("expected a mapping");
    const YAML::Node& self = node_;
    return Node(defined() ? self[key] : YAML::Node(YAML::NodeType::Undefined), join(key), src_);
  }

  bool has(const std::string& key) const { return child(key).defined(); }

  Node require(const std::string& key) const {
    Node c = child(key);
    if (!c.defined()) fail("missing required key '" + key + "'");
    return c;
  }

  void only(std::initializer_list<const char*> keys) const {
    if (!defined()) return;
    if (!node_.IsMap()) fail("expected a mapping");
    for (const auto& kv : node_) {
      const auto k = kv.first.as<std::string>();
      if (std::none_of(keys.begin(), keys.end(), [&](const char* a) { return k == a; })) {
        Node(kv.first, join(k), src_).fail("unknown key");
      }
    }
  }

  std::vector<Node> items() const {
    if (!node_.IsSequence()) fail("expected a list");
    std::vector<Node> out;
    for (std::size_t i = 0; i < node_.size(); ++i) {
      out.emplace_back(node_[i], path_ + "[" + std::to_string(i) + "]", src_);
    }
    return out;
  }

  bool is_scalar() const { return node_.IsScalar(); }
  bool is_map() const { return node_.IsMap(); }
  bool is_sequence() const { return node_.IsSequence(); }

  std::string str() const {
    if (!node_.IsScalar()) fail("expected a scalar");
    return node_.Scalar();
  }

  long long integer(long long lo = std::numeric_limits<long long>::min(),
                    long long hi = std::numeric_limits<long long>::max()) const {
    long long v = 0;
    if (!node_.IsScalar() || !YAML::convert<long long>::decode(node_, v)) fail("expected an integer");
    if (v < lo || v > hi) fail("value " + std::to_string(v) + " outside [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
    return v;
  }
  int int32(int lo = 0) const { return static_cast<int>(integer(lo, std::numeric_limits<int>::max())); }
  std::size_t size() const { return static_cast<std::size_t>(integer(0)); }
  std::uint64_t u64() const {
    std::uint64_t v = 0;
    if (!node_.IsScalar() || node_.Scalar().find('-') != std::string::npos || !YAML::convert<std::uint64_t>::decode(node_, v)) {
      fail("expected a non-negative integer");
    }
    return v;
  }
  double real() const {
    double v = 0.0;
    if (!node_.IsScalar() || !YAML::convert<double>::decode(node_, v)) fail("expected a number");
    return v;
  }
  bool boolean() const {
    bool v = false;
    if (!node_.IsScalar() || !YAML::convert<bool>::decode(node_, v)) fail("expected true or false");
    return v;
  }
  std::vector<int> int_list(int lo = 0) const {
    std::vector<int> out;
    for (const auto& n : items()) out.push_back(n.int32(lo));
    return out;
  }

 private:
  std::string join(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  YAML::Node node_;
  std::string path_;
  const Source* src_;
};

struct PlanSection {
  std::vector<std::string> strategies;
  bool lenient_alphalora = false;
  std::vector<std::string> sweep;
  std::optional<ExpertAllocation> sweep_experts;
  std::vector<AllocationPlan> custom;
};

struct AnalyzeSection {
  std::vector<double> thresholds = {1e-4, 1e-3, 1e-2};
  std::string split = "eval";
  std::size_t max_examples = 0;
  TraceOptions trace;
  HistogramSpec histogram;
};

struct RunConfig {
  std::string name = "run";
  std::optional<std::string> output_dir;
  BaselineGeometry baseline;
  PlanSection plan;
  std::optional<ToyModelConfig> model;
  std::uint64_t model_seed = 0;
  std::optional<SyntheticTask> task;
  TrainHyper train;
  bool train_present = false;
  AnalyzeSection analyze;
};

namespace detail {

inline ActivationPolicy parse_policy(const Node& n) {
  if (n.is_scalar()) {
    // "top_k=2" / "top_p=0.5" shorthand, matching the report format.
    const auto s = n.str();
    const auto eq = s.find('=');
    if (eq == std::string::npos) n.fail("expected top_k=K or top_p=P");
    const auto kind = s.substr(0, eq);
    try {
      if (kind == "top_k") return ActivationPolicy::top_k(static_cast<std::size_t>(std::stoul(s.substr(eq + 1))));
      if (kind == "top_p") return ActivationPolicy::top_p(std::stod(s.substr(eq + 1)));
    } catch (const std::exception&) {
      n.fail("malformed policy '" + s + "'");
    }
    n.fail("unknown policy '" + kind + "'");
  }
  n.only({"kind", "k", "threshold"});
  const auto kind = n.require("kind").str();
  if (kind == "top_k") return ActivationPolicy::top_k(n.require("k").size());
  if (kind == "top_p") return ActivationPolicy::top_p(n.require("threshold").real());
  n.child("kind").fail("unknown policy '" + kind + "'");
}

/// Expert or placeholder counts. A bare integer means the same count in every layer.
inline std::vector<int> parse_counts(const Node& n, int n_layers, const std::vector<int>& ranks, int min_count) {
  if (n.is_scalar()) return std::vector<int>(static_cast<std::size_t>(n_layers), n.int32(min_count));
  if (n.is_sequence()) {
    auto v = n.int_list(min_count);
    if (static_cast<int>(v.size()) != n_layers) {
      n.fail("list has " + std::to_string(v.size()) + " entries for " + std::to_string(n_layers) + " layers");
    }
    return v;
  }
  n.only({"strategy", "experts", "values", "group_size", "counts", "lenient", "base", "reference_rank"});
  const auto strategy = n.require("strategy").str();
  auto build = [&]() -> ExpertAllocation {
    if (strategy == "uniform") return ExpertAllocation::uniform(n.require("experts").int32(1));
    if (strategy == "grouped") {
      return ExpertAllocation::grouped(n.require("values").int_list(1),
                                       n.has("group_size") ? n.child("group_size").int32(1) : 0);
    }
    if (strategy == "explicit") {
      return ExpertAllocation::explicit_list(n.require("counts").int_list(1),
                                             n.has("lenient") && n.child("lenient").boolean());
    }
    if (strategy == "alphalora") return ExpertAllocation::alphalora(n.has("lenient") && n.child("lenient").boolean());
    if (strategy == "rank_scaled") {
      const auto base = parse_counts(n.require("base"), n_layers, ranks, 1);
      return ExpertAllocation::rank_scaled(ExpertAllocation::explicit_list(base), ranks,
                                           n.has("reference_rank") ? n.child("reference_rank").int32(1) : kReferenceRank);
    }
    n.child("strategy").fail("unknown strategy '" + strategy + "'");
  };
  try {
    return resolve_allocation(build(), n_layers);
  } catch (const ConfigError& e) {
    n.fail(e.what());
  }
}

inline std::vector<int> parse_ranks(const Node& n, int n_layers) {
  if (n.is_scalar()) return std::vector<int>(static_cast<std::size_t>(n_layers), n.int32(1));
  if (n.is_sequence()) {
    auto v = n.int_list(1);
    if (static_cast<int>(v.size()) != n_layers) {
      n.fail("list has " + std::to_string(v.size()) + " entries for " + std::to_string(n_layers) + " layers");
    }
    return v;
  }
  n.only({"r_min", "r_max", "group_size", "snap", "explicit", "groups"});
  try {
    if (n.has("groups")) {
      const auto per_group = n.child("groups").int_list(1);
      if (per_group.empty()) n.child("groups").fail("empty list");
      const int groups = static_cast<int>(per_group.size());
      const int gs = n.has("group_size") ? n.child("group_size").int32(1) : (n_layers + groups - 1) / groups;
      return resolve_ranks(grouped_ranks(per_group, n_layers, gs));
    }
    RankSchedule s;
    s.n_layers = n_layers;
    s.r_min = n.require("r_min").int32(1);
    s.r_max = n.require("r_max").int32(1);
    s.group_size = n.require("group_size").int32(1);
    if (n.has("snap")) s.snap = snap_mode_from_string(n.child("snap").str());
    if (n.has("explicit")) {
      s.snap = SnapMode::Explicit;
      s.explicit_ranks = n.child("explicit").int_list(1);
    }
    return resolve_ranks(s);
  } catch (const ConfigError& e) {
    n.fail(e.what());
  }
}

/// A plan from an allocation-style section: experts, ranks, placeholders, policy.
inline AllocationPlan parse_plan(const Node& n, const std::string& default_name, int n_layers,
                                 const std::vector<SiteShape>& sites) {
  n.only({"name", "experts", "ranks", "placeholders", "policy"});
  const auto name = n.has("name") ? n.child("name").str() : default_name;
  const auto ranks = parse_ranks(n.require("ranks"), n_layers);
  const auto experts = parse_counts(n.require("experts"), n_layers, ranks, 1);
  std::vector<int> placeholders(static_cast<std::size_t>(n_layers), 0);
  if (n.has("placeholders")) {
    const Node p = n.child("placeholders");
    if (p.is_scalar() && p.str() == "match") {
      placeholders = experts;
    } else {
      placeholders = parse_counts(p, n_layers, ranks, 0);
    }
  }
  const auto policy = n.has("policy") ? parse_policy(n.child("policy")) : ActivationPolicy::top_k(2);
  try {
    return make_plan(name, sites, experts, ranks, placeholders, policy);
  } catch (const ConfigError& e) {
    n.fail(e.what());
  }
}

inline void parse_baseline(const Node& n, RunConfig& rc) {
  n.only({"n_layers", "experts", "rank", "top_k", "sites"});
  auto& b = rc.baseline;
  if (n.has("n_layers")) b.n_layers = n.child("n_layers").int32(1);
  if (n.has("experts")) b.experts = n.child("experts").int32(1);
  if (n.has("rank")) b.rank = n.child("rank").int32(1);
  if (n.has("top_k")) b.top_k = n.child("top_k").int32(1);
  if (n.has("sites")) {
    b.sites.clear();
    for (const auto& s : n.child("sites").items()) {
      s.only({"name", "out", "in"});
      b.sites.push_back({s.require("name").str(), s.require("out").size(), s.require("in").size()});
    }
    if (b.sites.empty()) n.child("sites").fail("at least one site is required");
  }
  try {
    b.plan().validate();
  } catch (const ConfigError& e) {
    n.fail(e.what());
  }
}

inline void parse_plan_section(const Node& n, RunConfig& rc) {
  n.only({"strategies", "lenient_alphalora", "sweep", "sweep_experts", "custom"});
  auto& p = rc.plan;
  if (n.has("lenient_alphalora")) p.lenient_alphalora = n.child("lenient_alphalora").boolean();
  if (n.has("strategies")) {
    const auto known = preset_names();
    for (const auto& s : n.child("strategies").items()) {
      const auto name = s.str();
      if (std::find(known.begin(), known.end(), name) == known.end()) s.fail("unknown strategy '" + name + "'");
      p.strategies.push_back(name);
    }
  }
  if (n.has("sweep")) {
    for (const auto& s : n.child("sweep").items()) p.sweep.push_back(s.str());
  }
  if (n.has("sweep_experts")) {
    const auto counts = parse_counts(n.child("sweep_experts"), rc.baseline.n_layers, {}, 1);
    p.sweep_experts = ExpertAllocation::explicit_list(counts);
  }
  if (n.has("custom")) {
    for (const auto& c : n.child("custom").items()) {
      if (!c.has("name")) c.fail("custom plans need a name");
      p.custom.push_back(parse_plan(c, "", rc.baseline.n_layers, rc.baseline.sites));
    }
  }
}

inline void parse_model(const Node& n, RunConfig& rc) {
  n.only({"n_layers", "d_model", "d_ff", "n_heads", "vocab_size", "seq_len", "sites", "adapter_std",
          "placeholder_mass", "seed"});
  ToyModelConfig c;
  if (n.has("n_layers")) c.n_layers = n.child("n_layers").int32(1);
  if (n.has("d_model")) c.d_model = n.child("d_model").int32(1);
  if (n.has("d_ff")) c.d_ff = n.child("d_ff").int32(1);
  if (n.has("n_heads")) c.n_heads = n.child("n_heads").int32(1);
  if (n.has("vocab_size")) c.vocab_size = n.child("vocab_size").int32(2);
  if (n.has("seq_len")) c.seq_len = n.child("seq_len").int32(1);
  if (n.has("sites")) {
    c.sites.clear();
    for (const auto& s : n.child("sites").items()) {
      const auto name = s.str();
      try {
        c.projection_shape(name);
      } catch (const ConfigError& e) {
        s.fail(e.what());
      }
      c.sites.push_back(name);
    }
  }
  if (n.has("adapter_std")) c.adapter_std = n.child("adapter_std").real();
  if (n.has("placeholder_mass")) {
    try {
      c.placeholder_mass = placeholder_mass_from_string(n.child("placeholder_mass").str());
    } catch (const ConfigError& e) {
      n.child("placeholder_mass").fail(e.what());
    }
  }
  rc.model_seed = n.require("seed").u64();
  rc.model = c;
}

inline void parse_task(const Node& n, RunConfig& rc) {
  n.only({"kind", "seed", "n_train", "n_eval"});
  SyntheticTask t;
  if (n.has("kind")) {
    try {
      t.kind = task_kind_from_string(n.child("kind").str());
    } catch (const ConfigError& e) {
      n.child("kind").fail(e.what());
    }
  }
  t.seed = n.require("seed").u64();
  if (n.has("n_train")) t.n_train = n.child("n_train").size();
  if (n.has("n_eval")) t.n_eval = n.child("n_eval").size();
  rc.task = t;
}

inline void parse_train(const Node& n, RunConfig& rc) {
  n.only({"lr", "momentum", "steps", "batch", "aux_load_balance", "aux_active_count", "eval_every", "seed"});
  auto& h = rc.train;
  rc.train_present = true;
  if (n.has("lr")) h.lr = n.child("lr").real();
  if (n.has("momentum")) h.momentum = n.child("momentum").real();
  if (n.has("steps")) h.steps = n.child("steps").size();
  if (n.has("batch")) h.batch = n.child("batch").size();
  if (n.has("aux_load_balance")) h.aux_load_balance = n.child("aux_load_balance").real();
  if (n.has("aux_active_count")) h.aux_active_count = n.child("aux_active_count").real();
  if (n.has("eval_every")) h.eval_every = n.child("eval_every").size();
  h.seed = n.require("seed").u64();
  try {
    h.validate();
  } catch (const ConfigError& e) {
    n.fail(e.what());
  }
}

inline void parse_analyze(const Node& n, RunConfig& rc) {
  n.only({"thresholds", "split", "max_examples", "max_tokens", "trace_seed", "histogram"});
  auto& a = rc.analyze;
  if (n.has("thresholds")) {
    a.thresholds.clear();
    for (const auto& t : n.child("thresholds").items()) {
      const double v = t.real();
      if (!(v > 0.0)) t.fail("thresholds must be positive");
      a.thresholds.push_back(v);
    }
  }
  if (n.has("split")) {
    a.split = n.child("split").str();
    if (a.split != "eval" && a.split != "train") n.child("split").fail("expected 'eval' or 'train'");
  }
  if (n.has("max_examples")) a.max_examples = n.child("max_examples").size();
  if (n.has("max_tokens")) a.trace.max_tokens = n.child("max_tokens").size();
  if (n.has("trace_seed")) a.trace.seed = n.child("trace_seed").u64();
  if (n.has("histogram")) {
    const Node h = n.child("histogram");
    h.only({"lo", "hi", "log_bins"});
    if (h.has("lo")) a.histogram.lo = h.child("lo").real();
    if (h.has("hi")) a.histogram.hi = h.child("hi").real();
    if (h.has("log_bins")) a.histogram.log_bins = h.child("log_bins").size();
    try {
      histogram_edges(a.histogram);
    } catch (const Error& e) {
      h.fail(e.what());
    }
  }
}

/// Writes `value` (parsed as YAML) at a dotted path, creating mappings on the way.
inline void apply_override(YAML::Node root, const std::string& assignment, Source& src) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set " + assignment + ": expected key.path=value");
  const auto path = assignment.substr(0, eq);
  YAML::Node value;
  try {
    value = YAML::Load(assignment.substr(eq + 1));
  } catch (const YAML::Exception& e) {
    throw ConfigError("--set " + path + ": " + e.msg);
  }
  std::vector<std::string> keys;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    keys.push_back(path.substr(start, dot - start));
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  YAML::Node cur = root;
  for (std::size_t i = 0; i + 1 < keys.size(); ++i) {
    if (keys[i].empty()) throw ConfigError("--set " + path + ": empty key");
    if (!cur.IsMap() && !cur.IsNull()) throw ConfigError("--set " + path + ": '" + keys[i] + "' is not inside a mapping");
    YAML::Node next = cur[keys[i]];
    if (!next.IsDefined() || next.IsNull()) {
      cur[keys[i]] = YAML::Node(YAML::NodeType::Map);
      next = cur[keys[i]];
    }
    cur.reset(next);
  }
  if (!cur.IsMap() && !cur.IsNull()) throw ConfigError("--set " + path + ": parent is not a mapping");
  cur[keys.back()] = value;
  src.overridden.insert(path);
}

}  // namespace detail

/// Loads and fully validates a run configuration. `overrides` are key.path=value
/// assignments applied on top of the file.
inline RunConfig load_run_config(const std::filesystem::path& file, const std::vector<std::string>& overrides = {}) {
  Source src{file.string(), {}};
  YAML::Node root;
  try {
    root = YAML::LoadFile(file.string());
  } catch (const YAML::BadFile&) {
    throw ConfigError(file.string() + ": cannot read config file");
  } catch (const YAML::ParserException& e) {
    throw ConfigError(file.string() + ":" + std::to_string(e.mark.line + 1) + ":" + std::to_string(e.mark.column + 1) +
                      ": " + e.msg);
  }
  if (root.IsNull()) root = YAML::Node(YAML::NodeType::Map);
  if (!root.IsMap()) throw ConfigError(file.string() + ": top level must be a mapping");
  for (const auto& o : overrides) detail::apply_override(root, o, src);

  const Node top(root, "", &src);
  top.only({"name", "output_dir", "baseline", "plan", "model", "allocation", "task", "train", "analyze"});
  RunConfig rc;
  if (top.has("name")) {
    rc.name = top.child("name").str();
    if (rc.name.empty() || rc.name.find_first_of("/\\") != std::string::npos || rc.name == "." || rc.name == "..") {
      top.child("name").fail("must be a plain directory name");
    }
  }
  if (top.has("output_dir")) rc.output_dir = top.child("output_dir").str();
  if (top.has("baseline")) detail::parse_baseline(top.child("baseline"), rc);
  if (top.has("plan")) detail::parse_plan_section(top.child("plan"), rc);
  if (top.has("model")) detail::parse_model(top.child("model"), rc);
  if (top.has("allocation")) {
    if (!rc.model) top.child("allocation").fail("requires a model section");
    const Node a = top.child("allocation");
    rc.model->plan = detail::parse_plan(a, rc.name, rc.model->n_layers, rc.model->site_shapes());
  } else if (rc.model) {
    top.fail("a model section requires an allocation section");
  }
  if (rc.model) {
    try {
      rc.model->validate();
    } catch (const ConfigError& e) {
      top.child("model").fail(e.what());
    }
  }
  if (top.has("task")) detail::parse_task(top.child("task"), rc);
  if (top.has("train")) detail::parse_train(top.child("train"), rc);
  if (top.has("analyze")) detail::parse_analyze(top.child("analyze"), rc);
  return rc;
}

}  // namespace hilo::cli
