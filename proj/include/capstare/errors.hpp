// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace capstare {

/// Error families. The numeric values double as process exit codes for the
/// command-line tool and as status codes of the C API.
enum class ErrorCategory : int {
  internal = 1,
  config = 2,
  data = 3,
  numeric = 4,
  format = 5,
  shape = 6,
  contract = 7,
};

const char* category_name(ErrorCategory category) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& message)
      : std::runtime_error(message), category_(category) {}

  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& m) : Error(ErrorCategory::shape, m) {}
};

class ContractError : public Error {
 public:
  explicit ContractError(const std::string& m) : Error(ErrorCategory::contract, m) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& m) : Error(ErrorCategory::config, m) {}
};

/// Data-level failure. `kind` distinguishes missing files from malformed
/// label tables and count mismatches.
class DataError : public Error {
 public:
  enum class Kind { missing_file, parse, count_mismatch, invalid };

  DataError(Kind kind, const std::string& m) : Error(ErrorCategory::data, m), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& m) : Error(ErrorCategory::numeric, m) {}
};

/// Binary or text format violation. `kind` separates version mismatches,
/// shape mismatches against a config and corrupt payloads.
class FormatError : public Error {
 public:
  enum class Kind { bad_magic, version, shape_mismatch, corrupt, io };

  FormatError(Kind kind, const std::string& m) : Error(ErrorCategory::format, m), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace capstare
