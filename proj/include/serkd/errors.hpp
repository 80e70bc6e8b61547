#pragma once

#include <stdexcept>
#include <string>

namespace serkd {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Binary op or layer received operands whose shapes do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A documented precondition of an operation was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// A computation produced (or was fed) non-finite values.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration: grid divisibility, unknown keys, bad values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// The requested angle-loss strategy does not fit the memory budget.
class PlanError : public Error {
 public:
  using Error::Error;
};

/// Pairwise-distance normalizer collapsed (all tokens of a batch coincide).
class DegenerateBatchError : public Error {
 public:
  using Error::Error;
};

/// Malformed or truncated tensor/archive stream.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace serkd
