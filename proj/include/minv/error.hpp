#pragma once

#include <stdexcept>
#include <string>

namespace minv {

/// Shape or argument contract violation (maps to CLI exit code 2 when it
/// stems from configuration, otherwise surfaced as a programming error).
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed, truncated or mismatched binary file.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// NaN/Inf or divergence detected during a numeric routine.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad key, value or combination in a run configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace minv
