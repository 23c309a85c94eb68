#pragma once

#include <stdexcept>
#include <string>

namespace apcnet {

/// Invalid configuration, shapes, or preconditions.  CLI exit code 2.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// Numerical failure: divergence, failed factorization, near-zero pivot.
/// CLI exit code 3.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

/// Missing or inconsistent data (misaligned snapshots, absent files).
struct DataError : std::runtime_error {
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace apcnet
