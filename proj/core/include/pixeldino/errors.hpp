#pragma once

#include <stdexcept>
#include <string>

namespace pixeldino {

// Tensor shapes disagree with what an operation requires.
class DimensionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A NaN or Inf appeared in a forward value, gradient or loss.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// API misuse, e.g. backward() on a tensor that is not on a tape.
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Invalid configuration values or run setup (maps to CLI exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// File format or filesystem failure.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace pixeldino
