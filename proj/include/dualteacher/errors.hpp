#pragma once

#include <stdexcept>
#include <string>

namespace dualteacher {

// Invalid configuration value or invariant violation detected before any work runs.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Operand shapes do not line up.
struct DimensionError : std::runtime_error {
  explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad runtime input (non-finite pixels, unlabeled sample where a label is required, ...).
struct InputError : std::runtime_error {
  explicit InputError(const std::string& msg) : std::runtime_error(msg) {}
};

// Operation called on an object in the wrong state (unfitted translator, missing component).
struct StateError : std::runtime_error {
  explicit StateError(const std::string& msg) : std::runtime_error(msg) {}
};

// On-disk data does not conform to a documented format.
struct FormatError : std::runtime_error {
  explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// A loss or parameter went non-finite during training.
struct DivergenceError : std::runtime_error {
  explicit DivergenceError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ReportError : std::runtime_error {
  explicit ReportError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace dualteacher
