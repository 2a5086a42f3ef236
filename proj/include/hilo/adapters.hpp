#pragma once

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "hilo/autodiff.hpp"
#include "hilo/errors.hpp"
#include "hilo/matrix.hpp"
#include "hilo/rng.hpp"

namespace hilo {

inline constexpr double kDefaultAdapterStd = 0.02;

/// One low-rank expert: delta(x) = scale * A (B x), A is n x r, B is r x m.
///
/// A placeholder expert owns no matrices (rank 0) and contributes nothing.
struct LoraAdapter {
  std::size_t n = 0;
  std::size_t m = 0;
  std::size_t rank = 0;
  bool is_placeholder = false;
  Matrix a;
  Matrix b;
  /// Multiplier on the delta; 1 leaves w' = w + AB unscaled.
  double scale = 1.0;

  /// r * (n + m) for a real adapter, 0 for a placeholder.
  std::size_t parameter_count() const { return is_placeholder ? 0 : rank * (n + m); }
};

/// A ~ N(0, std^2) i.i.d. from the seeded generator, B = 0.
inline LoraAdapter init_adapter(std::size_t n, std::size_t m, std::size_t r, std::uint64_t seed,
                                double stddev = kDefaultAdapterStd) {
  if (n == 0 || m == 0) throw ConfigError("init_adapter: dimensions must be positive");
  if (r < 1 || r > std::min(n, m)) {
    throw ConfigError("init_adapter: rank " + std::to_string(r) + " outside [1, min(" + std::to_string(n) +
                      ", " + std::to_string(m) + ")]");
  }
  if (!(stddev > 0.0)) throw ConfigError("init_adapter: std must be positive");
  LoraAdapter ad;
  ad.n = n;
  ad.m = m;
  ad.rank = r;
  ad.a = Matrix(n, r);
  ad.b = Matrix(r, m);
  Rng rng(seed);
  for (double& v : ad.a.data()) v = rng.normal(0.0, stddev);
  return ad;
}

inline LoraAdapter make_placeholder(std::size_t n, std::size_t m) {
  LoraAdapter ad;
  ad.n = n;
  ad.m = m;
  ad.is_placeholder = true;
  return ad;
}

/// A (B x), never forming the n x m product.
inline std::vector<double> adapter_delta(const LoraAdapter& adapter, std::span<const double> x) {
  if (adapter.is_placeholder) throw ContractError("adapter_delta: placeholder experts have no delta");
  if (x.size() != adapter.m) {
    throw ShapeError("adapter_delta: input length " + std::to_string(x.size()) + ", expected " +
                     std::to_string(adapter.m));
  }
  const auto bx = matvec(adapter.b, x);
  auto out = matvec(adapter.a, bx);
  if (adapter.scale != 1.0) {
    for (double& v : out) v *= adapter.scale;
  }
  return out;
}

/// Taped delta for token rows: X (T x m) -> X B^T A^T (T x n).
inline Var adapter_delta_rows(Tape& t, Var x_rows, Var a, Var b, double scale = 1.0) {
  Var out = ad::matmul_nt(t, ad::matmul_nt(t, x_rows, b), a);
  return scale == 1.0 ? out : ad::scale(t, out, scale);
}

// Raw array IO for checkpoints: little-endian IEEE-754 doubles, row-major.

inline void write_f64_le(std::ostream& os, std::span<const double> values) {
  for (double v : values) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    char bytes[8];
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xFF);
    os.write(bytes, 8);
  }
}

inline void read_f64_le(std::istream& is, std::span<double> values) {
  for (double& v : values) {
    unsigned char bytes[8];
    if (!is.read(reinterpret_cast<char*>(bytes), 8)) throw Error("checkpoint array truncated");
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
    v = std::bit_cast<double>(bits);
  }
}

/// Writes A then B. Placeholders write nothing.
inline void write_adapter_arrays(std::ostream& os, const LoraAdapter& adapter) {
  if (adapter.is_placeholder) return;
  write_f64_le(os, adapter.a.data());
  write_f64_le(os, adapter.b.data());
}

inline void read_adapter_arrays(std::istream& is, LoraAdapter& adapter) {
  if (adapter.is_placeholder) return;
  adapter.a = Matrix(adapter.n, adapter.rank);
  adapter.b = Matrix(adapter.rank, adapter.m);
  read_f64_le(is, adapter.a.data());
  read_f64_le(is, adapter.b.data());
}

}  // namespace hilo
