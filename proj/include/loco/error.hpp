#pragma once

#include <stdexcept>
#include <string>

namespace loco {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Inconsistent extents, bad channel counts, failed shape chaining.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration or spec value. The message names the offending field.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values, degenerate vectors, violated numeric invariants.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// File and stream failures.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace loco
