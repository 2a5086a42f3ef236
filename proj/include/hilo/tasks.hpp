#pragma once

// Seeded synthetic tasks. Train and eval splits never share a sequence.

#include <algorithm>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "hilo/errors.hpp"
#include "hilo/model.hpp"
#include "hilo/rng.hpp"

namespace hilo {

enum class TaskKind { SequenceClassification, TokenCopy, ModularAddition };

inline std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::SequenceClassification: return "sequence_classification";
    case TaskKind::TokenCopy: return "token_copy";
    case TaskKind::ModularAddition: return "modular_addition";
  }
  return "?";
}

inline TaskKind task_kind_from_string(const std::string& s) {
  if (s == "sequence_classification") return TaskKind::SequenceClassification;
  if (s == "token_copy") return TaskKind::TokenCopy;
  if (s == "modular_addition") return TaskKind::ModularAddition;
  throw ConfigError("unknown task kind '" + s + "'");
}

struct SyntheticTask {
  TaskKind kind = TaskKind::TokenCopy;
  std::uint64_t seed = 0;
  std::size_t n_train = 512;
  std::size_t n_eval = 256;
};

struct Dataset {
  std::vector<Example> train;
  std::vector<Example> eval;
  /// Predictions and the loss only consider logits [0, n_classes).
  std::size_t n_classes = 0;
};

namespace detail {

/// Draw sequences until `count` new ones (not in `seen`) are collected.
template <typename Make>
std::vector<Example> draw_unique(std::size_t count, std::set<std::vector<int>>& seen, Make make, std::size_t max_tries) {
  std::vector<Example> out;
  std::size_t tries = 0;
  while (out.size() < count) {
    if (++tries > max_tries) throw ConfigError("task: cannot draw enough distinct sequences; reduce n_train/n_eval");
    Example ex = make(out.size());
    if (seen.insert(ex.tokens).second) out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace detail

/// Generate both splits. Same task spec and geometry -> identical data.
///
/// token_copy: random tokens, each position's target is its own token.
/// sequence_classification: label = parity of the token sum, scored at the
///   last position over classes {0, 1}; labels alternate so splits are balanced.
/// modular_addition: [a, b, p] -> (a + b) mod p at the last position, with
///   p = vocab_size - 1 and token p as the separator.
inline Dataset generate(const SyntheticTask& task, const ToyModelConfig& geometry) {
  Dataset ds;
  Rng rng(derive_seed(task.seed, {0x7A5C}));
  const auto vocab = static_cast<std::uint64_t>(geometry.vocab_size);
  const auto len = static_cast<std::size_t>(geometry.seq_len);
  const std::size_t budget = 100 * (task.n_train + task.n_eval) + 1000;
  if (task.n_train == 0 || task.n_eval == 0) throw ConfigError("task: n_train and n_eval must be positive");

  switch (task.kind) {
    case TaskKind::TokenCopy: {
      ds.n_classes = vocab;
      auto make = [&](std::size_t) {
        Example ex;
        for (std::size_t i = 0; i < len; ++i) ex.tokens.push_back(static_cast<int>(rng.below(vocab)));
        ex.targets = ex.tokens;
        return ex;
      };
      std::set<std::vector<int>> seen;
      ds.train = detail::draw_unique(task.n_train, seen, make, budget);
      ds.eval = detail::draw_unique(task.n_eval, seen, make, budget);
      break;
    }
    case TaskKind::SequenceClassification: {
      if (len < 2) throw ConfigError("sequence_classification needs seq_len >= 2");
      ds.n_classes = 2;
      auto make = [&](std::size_t index) {
        const int label = static_cast<int>(index % 2);
        Example ex;
        int sum = 0;
        for (std::size_t i = 0; i + 1 < len; ++i) {
          const int tok = static_cast<int>(rng.below(vocab));
          sum += tok;
          ex.tokens.push_back(tok);
        }
        // Last token fixes the parity: pick uniformly among tokens of the needed parity.
        const int need = ((label - sum) % 2 + 2) % 2;
        int tok = 0;
        do {
          tok = static_cast<int>(rng.below(vocab));
        } while (tok % 2 != need);
        ex.tokens.push_back(tok);
        ex.targets.assign(len, -1);
        ex.targets.back() = label;
        return ex;
      };
      std::set<std::vector<int>> seen;
      ds.train = detail::draw_unique(task.n_train, seen, make, budget);
      ds.eval = detail::draw_unique(task.n_eval, seen, make, budget);
      break;
    }
    case TaskKind::ModularAddition: {
      if (len < 3) throw ConfigError("modular_addition needs seq_len >= 3");
      const int p = geometry.vocab_size - 1;
      ds.n_classes = static_cast<std::size_t>(p);
      std::vector<std::pair<int, int>> pairs;
      for (int a = 0; a < p; ++a)
        for (int b = 0; b < p; ++b) pairs.emplace_back(a, b);
      if (task.n_train + task.n_eval > pairs.size()) {
        throw ConfigError("modular_addition: only " + std::to_string(pairs.size()) + " distinct pairs");
      }
      for (std::size_t i = pairs.size(); i > 1; --i) std::swap(pairs[i - 1], pairs[rng.below(i)]);
      auto make = [p](std::pair<int, int> ab) {
        Example ex;
        ex.tokens = {ab.first, ab.second, p};
        ex.targets = {-1, -1, (ab.first + ab.second) % p};
        return ex;
      };
      for (std::size_t i = 0; i < task.n_train; ++i) ds.train.push_back(make(pairs[i]));
      for (std::size_t i = 0; i < task.n_eval; ++i) ds.eval.push_back(make(pairs[task.n_train + i]));
      break;
    }
  }
  return ds;
}

}  // namespace hilo
