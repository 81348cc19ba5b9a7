#pragma once

#include <stdexcept>
#include <string>

namespace bpsurv {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input data is malformed (CSV parse errors, invalid labels, empty input).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Inconsistent shapes between arguments.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration or parameter value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// An iterative solver or factorization failed.
class ConvergenceError : public Error {
 public:
  using Error::Error;
};

inline void require_dims(bool ok, const std::string& what) {
  if (!ok) throw DimensionError("dimension mismatch: " + what);
}

}  // namespace bpsurv
