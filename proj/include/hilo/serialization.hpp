#pragma once

// JSON forms of the configuration types, shared by checkpoints and the CLI.

#include <string>

#include <json.hpp>

#include "hilo/allocation.hpp"
#include "hilo/model.hpp"
#include "hilo/tasks.hpp"
#include "hilo/trainer.hpp"

namespace hilo {

inline nlohmann::json to_json(const ActivationPolicy& p) {
  if (p.is_top_k()) return {{"kind", "top_k"}, {"k", p.k}};
  return {{"kind", "top_p"}, {"threshold", p.threshold}};
}

inline ActivationPolicy policy_from_json(const nlohmann::json& j) {
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "top_k") return ActivationPolicy::top_k(j.at("k").get<std::size_t>());
  if (kind == "top_p") return ActivationPolicy::top_p(j.at("threshold").get<double>());
  throw ConfigError("unknown activation policy '" + kind + "'");
}

inline nlohmann::json to_json(const AllocationPlan& p) {
  nlohmann::json sites = nlohmann::json::array();
  for (const auto& s : p.sites) sites.push_back({{"name", s.name}, {"n", s.n}, {"m", s.m}});
  return {{"name", p.name},
          {"n_layers", p.n_layers},
          {"experts", p.experts},
          {"ranks", p.ranks},
          {"placeholders", p.placeholders},
          {"policy", to_json(p.policy)},
          {"sites", sites}};
}

inline AllocationPlan plan_from_json(const nlohmann::json& j) {
  AllocationPlan p;
  p.name = j.at("name").get<std::string>();
  p.n_layers = j.at("n_layers").get<int>();
  p.experts = j.at("experts").get<std::vector<int>>();
  p.ranks = j.at("ranks").get<std::vector<int>>();
  p.placeholders = j.at("placeholders").get<std::vector<int>>();
  p.policy = policy_from_json(j.at("policy"));
  for (const auto& s : j.at("sites")) {
    p.sites.push_back({s.at("name").get<std::string>(), s.at("n").get<std::size_t>(), s.at("m").get<std::size_t>()});
  }
  p.validate();
  return p;
}

inline nlohmann::json to_json(const ToyModelConfig& c) {
  return {{"n_layers", c.n_layers},
          {"d_model", c.d_model},
          {"d_ff", c.d_ff},
          {"n_heads", c.n_heads},
          {"vocab_size", c.vocab_size},
          {"seq_len", c.seq_len},
          {"sites", c.sites},
          {"adapter_std", c.adapter_std},
          {"placeholder_mass", c.placeholder_mass == PlaceholderMass::Retain ? "retain" : "exclude"},
          {"plan", to_json(c.plan)}};
}

inline PlaceholderMass placeholder_mass_from_string(const std::string& s) {
  if (s == "retain") return PlaceholderMass::Retain;
  if (s == "exclude") return PlaceholderMass::Exclude;
  throw ConfigError("placeholder_mass must be 'retain' or 'exclude', got '" + s + "'");
}

inline ToyModelConfig model_config_from_json(const nlohmann::json& j) {
  ToyModelConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.seq_len = j.at("seq_len").get<int>();
  c.sites = j.at("sites").get<std::vector<std::string>>();
  c.adapter_std = j.at("adapter_std").get<double>();
  c.placeholder_mass = placeholder_mass_from_string(j.at("placeholder_mass").get<std::string>());
  c.plan = plan_from_json(j.at("plan"));
  c.validate();
  return c;
}

inline nlohmann::json to_json(const SyntheticTask& t) {
  return {{"kind", to_string(t.kind)}, {"seed", t.seed}, {"n_train", t.n_train}, {"n_eval", t.n_eval}};
}

inline SyntheticTask task_from_json(const nlohmann::json& j) {
  SyntheticTask t;
  t.kind = task_kind_from_string(j.at("kind").get<std::string>());
  t.seed = j.at("seed").get<std::uint64_t>();
  t.n_train = j.at("n_train").get<std::size_t>();
  t.n_eval = j.at("n_eval").get<std::size_t>();
  return t;
}

inline nlohmann::json to_json(const TrainHyper& h) {
  return {{"lr", h.lr},
          {"momentum", h.momentum},
          {"steps", h.steps},
          {"batch", h.batch},
          {"aux_load_balance", h.aux_load_balance},
          {"aux_active_count", h.aux_active_count},
          {"eval_every", h.eval_every},
          {"seed", h.seed}};
}

inline TrainHyper hyper_from_json(const nlohmann::json& j) {
  TrainHyper h;
  h.lr = j.at("lr").get<double>();
  h.momentum = j.at("momentum").get<double>();
  h.steps = j.at("steps").get<std::size_t>();
  h.batch = j.at("batch").get<std::size_t>();
  h.aux_load_balance = j.at("aux_load_balance").get<double>();
  h.aux_active_count = j.at("aux_active_count").get<double>();
  h.eval_every = j.at("eval_every").get<std::size_t>();
  h.seed = j.at("seed").get<std::uint64_t>();
  return h;
}

/// One JSON-lines record. Wall time is deliberately absent so records are reproducible.
inline nlohmann::json to_json(const TrainRecord& r) {
  nlohmann::json j = {{"step", r.step},
                      {"loss", r.loss},
                      {"task_loss", r.task_loss},
                      {"aux_load_balance", r.aux_load_balance},
                      {"aux_active_count", r.aux_active_count}};
  j["eval_loss"] = r.eval_loss ? nlohmann::json(*r.eval_loss) : nlohmann::json(nullptr);
  j["eval_accuracy"] = r.eval_accuracy ? nlohmann::json(*r.eval_accuracy) : nlohmann::json(nullptr);
  return j;
}

inline TrainRecord record_from_json(const nlohmann::json& j) {
  TrainRecord r;
  r.step = j.at("step").get<std::size_t>();
  r.loss = j.at("loss").get<double>();
  r.task_loss = j.at("task_loss").get<double>();
  r.aux_load_balance = j.at("aux_load_balance").get<double>();
  r.aux_active_count = j.at("aux_active_count").get<double>();
  if (!j.at("eval_loss").is_null()) r.eval_loss = j.at("eval_loss").get<double>();
  if (!j.at("eval_accuracy").is_null()) r.eval_accuracy = j.at("eval_accuracy").get<double>();
  return r;
}

}  // namespace hilo
