#pragma once

#include <stdexcept>
#include <string>

namespace coberl {

/// Raised when a configuration value or model dimension is inconsistent.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// Raised when caller-supplied data violates an operation precondition.
class InputError : public std::runtime_error {
 public:
  explicit InputError(const std::string& what) : std::runtime_error(what) {}
};

/// Raised when a non-finite value is produced or consumed.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

/// Raised by the verification and orchestration harnesses.
class HarnessError : public std::runtime_error {
 public:
  explicit HarnessError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace coberl
