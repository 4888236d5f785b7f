#pragma once

#include <stdexcept>
#include <string>

namespace kdrift {

/// Invalid or inconsistent configuration. `field()` names the first
/// offending key so CLI diagnostics can point at it.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string field, const std::string& message)
      : std::runtime_error(field + ": " + message), field_(std::move(field)) {}

  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

/// Unreadable or malformed input data. The code distinguishes the
/// failure modes the loader can hit.
class DataError : public std::runtime_error {
 public:
  enum class Code { io, wrong_magic, truncated, count_mismatch };

  DataError(Code code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  Code code() const { return code_; }

 private:
  Code code_;
};

}  // namespace kdrift
