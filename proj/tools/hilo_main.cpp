// hilo: plan budgets, train toy models, analyze checkpoints, summarize runs.
//
// Exit codes: 0 success, 1 runtime failure, 2 configuration error.

#include <CLI11.hpp>
#include <fmt/core.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "hilo/budget.hpp"
#include "hilo/checkpoint.hpp"
#include "run_config.hpp"

namespace fs = std::filesystem;
using namespace hilo;
using hilo::cli::RunConfig;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;

struct Common {
  std::string config;
  std::string out;
  std::vector<std::string> sets;
};

fs::path output_root(const std::string& flag, const std::optional<std::string>& from_config) {
  if (!flag.empty()) return flag;
  if (from_config) return *from_config;
  if (const char* env = std::getenv("HILO_OUTPUT_ROOT"); env && *env) return env;
  return "hilo_out";
}

void write_file(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  os << text;
  if (!os) throw Error("cannot write " + p.string());
}

std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw Error("cannot read " + p.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// ----------------------------------------------------------------- plan ----

struct PlanArgs {
  Common common;
  std::vector<std::string> strategies;
  std::vector<std::string> sweep;
};

int cmd_plan(const PlanArgs& a) {
  const RunConfig rc = cli::load_run_config(a.common.config, a.common.sets);
  const auto& g = rc.baseline;
  const AllocationPlan baseline = g.plan();

  std::vector<AllocationPlan> plans;
  if (!a.strategies.empty()) {
    for (const auto& s : a.strategies) {
      try {
        plans.push_back(preset_plan(s, g, rc.plan.lenient_alphalora));
      } catch (const ConfigError& e) {
        throw ConfigError("command line: strategy '" + s + "': " + e.what());
      }
    }
  } else {
    for (const auto& s : rc.plan.strategies) plans.push_back(preset_plan(s, g, rc.plan.lenient_alphalora));
    for (const auto& p : rc.plan.custom) plans.push_back(p);
  }
  const auto& codes = a.sweep.empty() ? rc.plan.sweep : a.sweep;
  const auto experts = rc.plan.sweep_experts.value_or(ExpertAllocation::uniform(g.experts));
  for (const auto& code : codes) {
    try {
      plans.push_back(rank_code_plan(code, g, experts));
    } catch (const ConfigError& e) {
      throw ConfigError("sweep code '" + code + "': " + e.what());
    }
  }
  if (plans.empty()) throw ConfigError(a.common.config + ": nothing to plan (no strategies, custom plans or sweep codes)");

  const auto report = budget_report(plans, baseline);
  const fs::path dir = output_root(a.common.out, rc.output_dir) / "plans" / rc.name;
  const std::string table = budget_table(report);
  write_file(dir / "budgets.csv", budget_csv(report));
  write_file(dir / "budgets.txt", table);
  std::cout << table << "\nwrote " << (dir / "budgets.csv").string() << '\n';
  return 0;
}

// ---------------------------------------------------------------- train ----

struct TrainArgs {
  Common common;
  std::optional<std::size_t> steps;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
  std::string name;
  bool resume = false;
};

nlohmann::json run_metadata(const RunConfig& rc) {
  return {{"name", rc.name}, {"task", to_json(*rc.task)}, {"hyper", to_json(rc.train)}};
}

/// Records of an earlier run up to and including `step`, as raw JSON lines.
std::vector<std::string> records_up_to(const fs::path& file, std::size_t step) {
  std::vector<std::string> keep;
  std::ifstream is(file);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) throw Error(file.string() + ": unreadable record line");
    if (j.at("step").get<std::size_t>() <= step) keep.push_back(line);
  }
  return keep;
}

int cmd_train(const TrainArgs& a) {
  auto sets = a.common.sets;
  if (a.steps) sets.push_back("train.steps=" + std::to_string(*a.steps));
  if (a.lr) sets.push_back("train.lr=" + fmt::format("{:.17g}", *a.lr));
  if (a.seed) sets.push_back("train.seed=" + std::to_string(*a.seed));
  if (!a.name.empty()) sets.push_back("name=" + a.name);
  const RunConfig rc = cli::load_run_config(a.common.config, sets);
  if (!rc.model) throw ConfigError(a.common.config + ": train needs a model section");
  if (!rc.task) throw ConfigError(a.common.config + ": train needs a task section (task.seed is required)");
  if (!rc.train_present) throw ConfigError(a.common.config + ": train needs a train section (train.seed is required)");

  const fs::path dir = output_root(a.common.out, rc.output_dir) / "runs" / rc.name;
  const fs::path ckpt = dir / "checkpoint";
  const fs::path records_file = dir / "train_records.jsonl";
  const fs::path timing_file = dir / "timing.jsonl";
  const Dataset ds = generate(*rc.task, *rc.model);

  ToyModel model;
  TrainState state;
  std::vector<std::string> kept;
  if (a.resume && fs::exists(ckpt / "manifest.json")) {
    auto loaded = load_checkpoint(ckpt);
    if (loaded.manifest.at("model") != to_json(*rc.model) || loaded.model.seed() != rc.model_seed) {
      throw ConfigError(a.common.config + ": model section differs from the checkpoint in " + ckpt.string());
    }
    const auto& run = loaded.manifest.at("run");
    if (run.value("task", nlohmann::json()) != to_json(*rc.task)) {
      throw ConfigError(a.common.config + ": task section differs from the checkpoint in " + ckpt.string());
    }
    model = std::move(loaded.model);
    state = std::move(loaded.state);
    kept = records_up_to(records_file, state.step);
    std::cerr << "resuming " << rc.name << " from step " << state.step << '\n';
  } else {
    model = ToyModel::build(*rc.model, rc.model_seed);
  }

  fs::create_directories(dir);
  write_file(dir / "run.json", nlohmann::json({{"model", to_json(*rc.model)},
                                               {"model_seed", rc.model_seed},
                                               {"task", to_json(*rc.task)},
                                               {"train", to_json(rc.train)}})
                                       .dump(2) +
                                   "\n");
  std::ofstream records(records_file, std::ios::trunc);
  for (const auto& line : kept) records << line << '\n';
  std::ofstream timing(timing_file, a.resume ? std::ios::app : std::ios::trunc);
  const auto result = train(model, ds, rc.train, state, [&](const TrainRecord& r) {
    records << to_json(r).dump() << '\n' << std::flush;
    timing << nlohmann::json({{"step", r.step}, {"wall_time", r.wall_time}}).dump() << '\n';
  });
  records.close();

  nlohmann::json summary = {{"name", rc.name}, {"plan", rc.model->plan.name}, {"step", state.step},
                            {"diverged", result.diverged}, {"adapter_params", model.adapter_parameter_count()}};
  if (!result.records.empty()) {
    const auto& last = result.records.back();
    summary["loss"] = last.loss;
    summary["eval_loss"] = last.eval_loss ? nlohmann::json(*last.eval_loss) : nlohmann::json(nullptr);
    summary["eval_accuracy"] = last.eval_accuracy ? nlohmann::json(*last.eval_accuracy) : nlohmann::json(nullptr);
  }
  if (result.diverged) {
    summary["diagnostic"] = result.diagnostic;
    write_file(dir / "summary.json", summary.dump(2) + "\n");
    std::cerr << "error: training diverged: " << result.diagnostic << "\n"
              << "partial records kept in " << records_file.string() << '\n';
    return kExitRuntime;
  }
  save_checkpoint(ckpt, model, state, run_metadata(rc));
  write_file(dir / "summary.json", summary.dump(2) + "\n");
  if (!result.records.empty() && result.records.back().eval_accuracy) {
    std::cout << fmt::format("{}: step {} loss {:.6f} eval_loss {:.6f} eval_accuracy {:.4f}\n", rc.name, state.step,
                             result.records.back().loss, *result.records.back().eval_loss,
                             *result.records.back().eval_accuracy);
  } else {
    std::cout << rc.name << ": nothing to do, already at step " << state.step << '\n';
  }
  std::cout << "wrote " << dir.string() << '\n';
  return 0;
}

// -------------------------------------------------------------- analyze ----

struct AnalyzeArgs {
  Common common;
  std::string input;
  std::string name;
  std::vector<double> thresholds;
  std::optional<std::size_t> max_tokens;
  std::optional<std::size_t> max_examples;
  std::optional<std::uint64_t> trace_seed;
  std::string split;
};

int cmd_analyze(const AnalyzeArgs& a) {
  RunConfig rc;
  if (!a.common.config.empty()) rc = cli::load_run_config(a.common.config, a.common.sets);
  else if (!a.common.sets.empty()) throw ConfigError("--set needs --config");
  auto opts = rc.analyze;
  if (!a.thresholds.empty()) opts.thresholds = a.thresholds;
  if (a.max_tokens) opts.trace.max_tokens = *a.max_tokens;
  if (a.max_examples) opts.max_examples = *a.max_examples;
  if (a.trace_seed) opts.trace.seed = *a.trace_seed;
  if (!a.split.empty()) opts.split = a.split;
  for (double t : opts.thresholds) {
    if (!(t > 0.0)) throw ConfigError("--threshold: thresholds must be positive");
  }
  if (opts.split != "eval" && opts.split != "train") throw ConfigError("--split: expected 'eval' or 'train'");

  fs::path ckpt = a.input;
  if (!fs::exists(ckpt / "manifest.json") && fs::exists(ckpt / "checkpoint" / "manifest.json")) ckpt /= "checkpoint";
  auto loaded = load_checkpoint(ckpt);
  const auto& run = loaded.manifest.at("run");
  if (!run.contains("task")) throw Error(ckpt.string() + ": manifest has no task; cannot rebuild the inputs");
  const SyntheticTask task = task_from_json(run.at("task"));
  const auto& cfg = loaded.model.config();
  const Dataset ds = generate(task, cfg);
  std::vector<Example> inputs = opts.split == "eval" ? ds.eval : ds.train;
  if (opts.max_examples > 0 && inputs.size() > opts.max_examples) inputs.resize(opts.max_examples);

  const auto trace = record_trace(loaded.model, inputs, opts.trace);
  const std::string name = !a.name.empty() ? a.name : run.value("name", rc.name);
  const fs::path dir = output_root(a.common.out, rc.output_dir) / "analyses" / name;

  std::ostringstream trace_os, prop_os, hist_os, active_os;
  write_trace_jsonl(trace_os, trace);
  write_proportions_csv(prop_os, trace, opts.thresholds);
  write_histograms_csv(hist_os, magnitude_histograms(trace, opts.histogram));
  ActiveUnitsRow row{cfg.plan.name, cfg.plan.policy.describe(), measure_active_units_exact(trace, cfg.plan),
                     std::nullopt, trace.entries.size(), 2.0};
  if (cfg.plan.policy.is_top_k()) {
    row.static_bound = active_units_static_exact(cfg.plan, static_cast<int>(cfg.plan.policy.k), true);
  }
  write_active_units_csv(active_os, {row});

  write_file(dir / "trace.jsonl", trace_os.str());
  write_file(dir / "proportions.csv", prop_os.str());
  write_file(dir / "histograms.csv", hist_os.str());
  write_file(dir / "active_units.csv", active_os.str());

  nlohmann::json summary = {{"name", name}, {"checkpoint_step", loaded.state.step}, {"entries", trace.entries.size()},
                            {"measured_active_units", row.measured.value()}, {"measured_exact", row.measured.str()}};
  nlohmann::json per_layer = nlohmann::json::array();
  for (std::size_t l : trace.layers()) per_layer.push_back(proportion_below(trace, l, 1e-3));
  summary["proportion_below_1e-3"] = per_layer;
  write_file(dir / "summary.json", summary.dump(2) + "\n");

  std::cout << fmt::format("{}: {} trace entries, measured active units {}", name, trace.entries.size(),
                           format_double(row.measured.value()));
  if (row.static_bound) std::cout << " (static bound " << format_double(row.static_bound->value()) << ")";
  std::cout << "\nwrote " << dir.string() << '\n';
  return 0;
}

// --------------------------------------------------------------- report ----

struct ReportArgs {
  Common common;
  std::vector<std::string> runs;
};

std::string csv_field(const nlohmann::json& j) {
  if (j.is_null()) return "";
  if (j.is_number_float()) return format_double(j.get<double>());
  if (j.is_string()) return j.get<std::string>();
  return j.dump();
}

int cmd_report(const ReportArgs& a) {
  RunConfig rc;
  if (!a.common.config.empty()) rc = cli::load_run_config(a.common.config, a.common.sets);
  const fs::path root = output_root(a.common.out, rc.output_dir);
  std::vector<std::string> names = a.runs;
  if (names.empty() && fs::is_directory(root / "runs")) {
    for (const auto& e : fs::directory_iterator(root / "runs")) {
      if (fs::exists(e.path() / "summary.json")) names.push_back(e.path().filename().string());
    }
    std::sort(names.begin(), names.end());
  }
  if (names.empty()) throw Error("no runs with a summary.json under " + (root / "runs").string());

  std::string csv = "run,plan,step,diverged,loss,eval_loss,eval_accuracy,adapter_params,measured_active_units\n";
  std::string table = fmt::format("{:<20} {:<16} {:>7} {:>10} {:>10} {:>9} {:>14} {:>8}\n", "run", "plan", "step",
                                  "loss", "eval_loss", "eval_acc", "adapter params", "active");
  for (const auto& n : names) {
    const auto s = nlohmann::json::parse(read_file(root / "runs" / n / "summary.json"));
    nlohmann::json active = nullptr;
    if (fs::exists(root / "analyses" / n / "summary.json")) {
      active = nlohmann::json::parse(read_file(root / "analyses" / n / "summary.json")).at("measured_active_units");
    }
    const auto get = [&](const char* k) { return s.contains(k) ? s.at(k) : nlohmann::json(nullptr); };
    csv += fmt::format("{},{},{},{},{},{},{},{},{}\n", n, csv_field(get("plan")), csv_field(get("step")),
                       csv_field(get("diverged")), csv_field(get("loss")), csv_field(get("eval_loss")),
                       csv_field(get("eval_accuracy")), csv_field(get("adapter_params")), csv_field(active));
    const auto num = [](const nlohmann::json& j, int prec) {
      return j.is_number() ? fmt::format("{:.{}f}", j.get<double>(), prec) : std::string("-");
    };
    table += fmt::format("{:<20} {:<16} {:>7} {:>10} {:>10} {:>9} {:>14} {:>8}\n", n, csv_field(get("plan")),
                         csv_field(get("step")), num(get("loss"), 4), num(get("eval_loss"), 4),
                         num(get("eval_accuracy"), 4), csv_field(get("adapter_params")), num(active, 4));
  }
  write_file(root / "report.csv", csv);
  std::cout << table << "\nwrote " << (root / "report.csv").string() << '\n';
  return 0;
}

void add_common(CLI::App* sub, Common& c, bool config_required) {
  auto* opt = sub->add_option("-c,--config", c.config, "YAML run configuration");
  if (config_required) opt->required()->check(CLI::ExistingFile);
  sub->add_option("-o,--out", c.out, "Output root (default: config output_dir, then $HILO_OUTPUT_ROOT, then ./hilo_out)");
  sub->add_option("--set", c.sets, "Override a config key, e.g. --set train.lr=0.5 (repeatable)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hilo: hierarchical mixture-of-LoRA-experts planning, training and analysis"};
  app.require_subcommand(1);

  PlanArgs plan;
  auto* p = app.add_subcommand("plan", "Budget table for preset strategies, custom plans and rank sweeps");
  add_common(p, plan.common, true);
  p->add_option("strategies", plan.strategies, "Preset strategies (overrides plan.strategies)");
  p->add_option("--sweep", plan.sweep, "Rank codes such as 2448 (overrides plan.sweep)")->delimiter(',');

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train the toy model and write records and a checkpoint");
  add_common(t, tr.common, true);
  t->add_option("--steps", tr.steps, "Override train.steps");
  t->add_option("--lr", tr.lr, "Override train.lr");
  t->add_option("--seed", tr.seed, "Override train.seed");
  t->add_option("--name", tr.name, "Override the run name");
  t->add_flag("--resume", tr.resume, "Continue from the run's checkpoint if present");

  AnalyzeArgs an;
  auto* z = app.add_subcommand("analyze", "Trace a checkpoint and write magnitude and activation analyses");
  add_common(z, an.common, false);
  z->add_option("input", an.input, "Run directory or checkpoint directory")->required();
  z->add_option("--name", an.name, "Analysis name (default: the run name)");
  z->add_option("--threshold", an.thresholds, "Thresholds for proportions.csv (repeatable)")->delimiter(',');
  z->add_option("--max-tokens", an.max_tokens, "Reservoir-sample at most this many tokens");
  z->add_option("--max-examples", an.max_examples, "Trace only the first N examples of the split");
  z->add_option("--trace-seed", an.trace_seed, "Seed of the token reservoir");
  z->add_option("--split", an.split, "Which split to trace: eval or train");

  ReportArgs rp;
  auto* r = app.add_subcommand("report", "Summarize trained runs and analyses into report.csv");
  add_common(r, rp.common, false);
  r->add_option("runs", rp.runs, "Run names (default: every run under the output root)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (p->parsed()) return cmd_plan(plan);
    if (t->parsed()) return cmd_train(tr);
    if (z->parsed()) return cmd_analyze(an);
    if (r->parsed()) return cmd_report(rp);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitRuntime;
}
