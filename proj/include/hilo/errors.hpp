#pragma once

#include <stdexcept>
#include <string>

namespace hilo {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand dimensions disagree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A plan, schedule or run configuration is invalid.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A caller broke an operation's precondition (e.g. non-scalar loss).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Requested key (layer, site, ...) does not exist.
class LookupError : public Error {
 public:
  using Error::Error;
};

/// A forward pass produced non-finite values (typically after divergence).
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace hilo
