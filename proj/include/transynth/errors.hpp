#pragma once

#include <stdexcept>
#include <string>

namespace transynth {

/// Base class for all library errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed specifications, dimension mismatches, bad option combinations.
/// Mapped to CLI exit code 2.
struct ConfigError : Error {
  using Error::Error;
};

/// Problems with the data itself: missing columns, non-finite values,
/// empty strata. Mapped to CLI exit code 2.
struct DataError : Error {
  using Error::Error;
};

/// Non-finite intermediate results, indefinite covariance matrices,
/// positivity diagnostics. Mapped to CLI exit code 3.
struct NumericError : Error {
  using Error::Error;
};

/// Root-finding failures; carries the residual norm at the last iterate.
/// Mapped to CLI exit code 3.
struct SolverError : Error {
  SolverError(const std::string& what, double residual)
      : Error(what), last_residual(residual) {}
  double last_residual;
};

}  // namespace transynth
