// Exception hierarchy shared by every module. Each error carries a stable
// category string so the command line tool can emit machine readable
// failure records without parsing free-form messages.
#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace wsc {

class Error : public std::runtime_error {
public:
  Error(std::string category, const std::string& message)
      : std::runtime_error(message), category_(std::move(category)) {}

  const std::string& category() const { return category_; }

private:
  std::string category_;
};

// Invalid or inconsistent configuration file content.
class ConfigError : public Error {
public:
  explicit ConfigError(const std::string& message) : Error("config", message) {}
};

// A function argument violates a documented precondition.
class ArgumentError : public Error {
public:
  explicit ArgumentError(const std::string& message) : Error("argument", message) {}
};

// Common-support trimming or the caliper left no usable comparison school.
class NoOverlapError : public Error {
public:
  explicit NoOverlapError(const std::string& message) : Error("no_overlap", message) {}
};

// Strict matching failed to pair an experimental control school.
class MatchingError : public Error {
public:
  explicit MatchingError(const std::string& message) : Error("matching", message) {}
};

// Numerical degeneracy: singular matrices, failed rescaling, non-convergence.
class NumericError : public Error {
public:
  explicit NumericError(const std::string& message) : Error("numeric", message) {}
};

// File system or serialization failure.
class IoError : public Error {
public:
  explicit IoError(const std::string& message) : Error("io", message) {}
};

}  // namespace wsc
