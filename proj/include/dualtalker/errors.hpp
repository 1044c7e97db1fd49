// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace dualtalker {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible with the requested operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf where finite values are required, or a degenerate numeric setup.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A tape record references a node that was never recorded.
class DanglingNodeError : public Error {
 public:
  using Error::Error;
};

/// Invalid argument values: empty regions, out-of-range ids, lengths too short.
class ArgumentError : public Error {
 public:
  using Error::Error;
};

/// Filesystem failures.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed binary or JSON files.
class FormatError : public Error {
 public:
  enum class Kind { bad_magic, version_mismatch, truncated, malformed };

  FormatError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

/// Rejected configuration (unknown keys, invalid values, mismatched checkpoints).
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace dualtalker
