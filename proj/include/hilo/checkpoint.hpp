#pragma once

// Checkpoint directory layout:
//   manifest.json   model config (with plan), base seed, step, array layout
//   adapters.bin    per real adapter, A then B (row-major little-endian f64)
//   gates.bin       per site, the gate matrix
//   optimizer.bin   momentum buffers in trainable-parameter order (may be empty)
// Base weights are not stored; they are regenerated from the base seed and
// verified against a checksum.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "hilo/adapters.hpp"
#include "hilo/model.hpp"
#include "hilo/serialization.hpp"
#include "hilo/trainer.hpp"

namespace hilo {

/// A checkpoint that does not match what its own manifest describes.
class CheckpointError : public Error {
 public:
  CheckpointError(const std::string& what, std::vector<std::string> diff)
      : Error(what + (diff.empty() ? "" : "\n  " + join(diff))), diff_(std::move(diff)) {}
  const std::vector<std::string>& diff() const { return diff_; }

 private:
  static std::string join(const std::vector<std::string>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "\n  " : "") + v[i];
    return s;
  }
  std::vector<std::string> diff_;
};

inline constexpr int kCheckpointVersion = 1;

/// FNV-1a over the IEEE bytes of the frozen weights.
inline std::string base_checksum(const ToyModel& model) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (double v : model.frozen_snapshot()) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) {
      h ^= (bits >> (8 * i)) & 0xFF;
      h *= 0x100000001b3ULL;
    }
  }
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

namespace detail {

inline nlohmann::json adapter_layout(const ToyModel& model) {
  nlohmann::json out = nlohmann::json::array();
  std::uint64_t offset = 0;
  const auto& names = model.config().site_shapes();
  for (std::size_t l = 0; l < model.n_layers(); ++l) {
    const auto& sites = model.layer(l).sites;
    for (std::size_t s = 0; s < sites.size(); ++s) {
      for (std::size_t e = 0; e < sites[s].experts.size(); ++e) {
        const LoraAdapter& ad = sites[s].experts[e];
        out.push_back({{"layer", l}, {"site", names[s].name}, {"index", e}, {"n", ad.n}, {"m", ad.m},
                       {"r", ad.rank}, {"is_placeholder", ad.is_placeholder}, {"offset", offset}});
        offset += 8 * ad.parameter_count();
      }
    }
  }
  return out;
}

inline nlohmann::json gate_layout(const ToyModel& model) {
  nlohmann::json out = nlohmann::json::array();
  std::uint64_t offset = 0;
  const auto& names = model.config().site_shapes();
  for (std::size_t l = 0; l < model.n_layers(); ++l) {
    const auto& sites = model.layer(l).sites;
    for (std::size_t s = 0; s < sites.size(); ++s) {
      const Matrix& g = sites[s].gate.weight;
      out.push_back({{"layer", l}, {"site", names[s].name}, {"rows", g.rows()}, {"cols", g.cols()}, {"offset", offset}});
      offset += 8 * g.size();
    }
  }
  return out;
}

inline void diff_json(const nlohmann::json& got, const nlohmann::json& want, const std::string& path,
                      std::vector<std::string>& out) {
  if (got.is_array() && want.is_array()) {
    if (got.size() != want.size()) {
      out.push_back(path + ": manifest has " + std::to_string(got.size()) + " entries, expected " +
                    std::to_string(want.size()));
    }
    for (std::size_t i = 0; i < std::min(got.size(), want.size()); ++i) {
      diff_json(got[i], want[i], path + "[" + std::to_string(i) + "]", out);
    }
    return;
  }
  if (got.is_object() && want.is_object()) {
    for (const auto& [k, v] : want.items()) {
      if (!got.contains(k)) {
        out.push_back(path + "." + k + ": missing, expected " + v.dump());
      } else {
        diff_json(got[k], v, path + "." + k, out);
      }
    }
    return;
  }
  if (got != want) out.push_back(path + ": manifest " + got.dump() + ", expected " + want.dump());
}

inline std::uintmax_t file_size_or_zero(const std::filesystem::path& p) {
  std::error_code ec;
  const auto n = std::filesystem::file_size(p, ec);
  return ec ? 0 : n;
}

}  // namespace detail

/// Writes all files of a checkpoint into `dir` (created if needed). `run` is
/// free-form metadata copied into the manifest.
inline void save_checkpoint(const std::filesystem::path& dir, const ToyModel& model, const TrainState& state,
                            const nlohmann::json& run = nlohmann::json::object()) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream os(dir / "adapters.bin", std::ios::binary | std::ios::trunc);
    for (std::size_t l = 0; l < model.n_layers(); ++l)
      for (const auto& site : model.layer(l).sites)
        for (const auto& e : site.experts) write_adapter_arrays(os, e);
    if (!os) throw Error("cannot write " + (dir / "adapters.bin").string());
  }
  {
    std::ofstream os(dir / "gates.bin", std::ios::binary | std::ios::trunc);
    for (std::size_t l = 0; l < model.n_layers(); ++l)
      for (const auto& site : model.layer(l).sites) write_f64_le(os, site.gate.weight.data());
    if (!os) throw Error("cannot write " + (dir / "gates.bin").string());
  }
  {
    std::ofstream os(dir / "optimizer.bin", std::ios::binary | std::ios::trunc);
    for (const auto& v : state.velocity) write_f64_le(os, v.data());
  }
  nlohmann::json manifest = {{"format", "hilo-checkpoint"},
                             {"version", kCheckpointVersion},
                             {"step", state.step},
                             {"base_seed", model.seed()},
                             {"base_checksum", base_checksum(model)},
                             {"model", to_json(model.config())},
                             {"adapters", detail::adapter_layout(model)},
                             {"gates", detail::gate_layout(model)},
                             {"optimizer_buffers", state.velocity.size()},
                             {"run", run}};
  std::ofstream os(dir / "manifest.json", std::ios::trunc);
  os << manifest.dump(2) << '\n';
  if (!os) throw Error("cannot write " + (dir / "manifest.json").string());
}

struct LoadedCheckpoint {
  ToyModel model;
  TrainState state;
  nlohmann::json manifest;
};

/// Rebuilds the model from the manifest and loads the arrays. Any mismatch
/// between manifest, regenerated layout and file sizes is a CheckpointError
/// listing every difference.
inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir) {
  nlohmann::json manifest;
  {
    std::ifstream is(dir / "manifest.json");
    if (!is) throw CheckpointError("checkpoint manifest not found in " + dir.string(), {});
    try {
      is >> manifest;
    } catch (const nlohmann::json::exception& e) {
      throw CheckpointError("checkpoint manifest is not valid JSON: " + std::string(e.what()), {});
    }
  }
  std::vector<std::string> diff;
  if (manifest.value("format", "") != "hilo-checkpoint") diff.push_back("format: expected \"hilo-checkpoint\"");
  if (manifest.value("version", 0) != kCheckpointVersion) diff.push_back("version: expected " + std::to_string(kCheckpointVersion));
  if (!diff.empty()) throw CheckpointError("unsupported checkpoint", diff);

  LoadedCheckpoint out{ToyModel{}, TrainState{}, manifest};
  try {
    out.model = ToyModel::build(model_config_from_json(manifest.at("model")), manifest.at("base_seed").get<std::uint64_t>());
    out.state.step = manifest.at("step").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("checkpoint manifest is incomplete: " + std::string(e.what()), {});
  } catch (const ConfigError& e) {
    throw CheckpointError("checkpoint manifest describes an invalid model: " + std::string(e.what()), {});
  }

  const ToyModel& m = out.model;
  detail::diff_json(manifest.value("adapters", nlohmann::json()), detail::adapter_layout(m), "adapters", diff);
  detail::diff_json(manifest.value("gates", nlohmann::json()), detail::gate_layout(m), "gates", diff);
  if (manifest.value("base_checksum", "") != base_checksum(m)) {
    diff.push_back("base_checksum: manifest " + manifest.value("base_checksum", std::string("<missing>")) +
                   ", regenerated " + base_checksum(m));
  }

  std::uintmax_t adapter_bytes = 0;
  std::uintmax_t gate_bytes = 0;
  for (std::size_t l = 0; l < m.n_layers(); ++l) {
    for (const auto& site : m.layer(l).sites) {
      gate_bytes += 8 * site.gate.weight.size();
      for (const auto& e : site.experts) adapter_bytes += 8 * e.parameter_count();
    }
  }
  const std::size_t buffers = manifest.value("optimizer_buffers", std::size_t{0});
  std::uintmax_t opt_bytes = 0;
  auto params = out.model.trainable_parameters();
  if (buffers != 0 && buffers != params.size()) {
    diff.push_back("optimizer_buffers: manifest " + std::to_string(buffers) + ", expected 0 or " +
                   std::to_string(params.size()));
  } else if (buffers != 0) {
    for (const Matrix* p : params) opt_bytes += 8 * p->size();
  }
  auto check_size = [&](const char* name, std::uintmax_t want) {
    const auto got = detail::file_size_or_zero(dir / name);
    if (got != want) diff.push_back(std::string(name) + ": " + std::to_string(got) + " bytes, expected " + std::to_string(want));
  };
  check_size("adapters.bin", adapter_bytes);
  check_size("gates.bin", gate_bytes);
  check_size("optimizer.bin", opt_bytes);
  if (!diff.empty()) throw CheckpointError("checkpoint " + dir.string() + " does not match its manifest", diff);

  {
    std::ifstream is(dir / "adapters.bin", std::ios::binary);
    for (std::size_t l = 0; l < out.model.n_layers(); ++l)
      for (auto& site : out.model.layer(l).sites)
        for (auto& e : site.experts) read_adapter_arrays(is, e);
  }
  {
    std::ifstream is(dir / "gates.bin", std::ios::binary);
    for (std::size_t l = 0; l < out.model.n_layers(); ++l)
      for (auto& site : out.model.layer(l).sites) read_f64_le(is, site.gate.weight.data());
  }
  if (buffers != 0) {
    std::ifstream is(dir / "optimizer.bin", std::ios::binary);
    for (const Matrix* p : params) {
      Matrix v(p->rows(), p->cols());
      read_f64_le(is, v.data());
      out.state.velocity.push_back(std::move(v));
    }
  }
  return out;
}

}  // namespace hilo
