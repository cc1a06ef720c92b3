// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace cnxt {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes disagree (channels, spatial dims, element counts).
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A convolution or layer geometry violates its own invariants.
class SpecError : public Error {
 public:
  using Error::Error;
};

/// Invalid user configuration: unknown keys, out-of-range hyperparameters.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Operation called in the wrong state, e.g. backward before forward.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values appeared during training or evaluation.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// File could not be opened, read or written.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Base for malformed on-disk data.
class FormatError : public Error {
 public:
  using Error::Error;
};

class BadMagicError : public FormatError {
 public:
  using FormatError::FormatError;
};

class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

class ChecksumError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// Input ended before a declared length was satisfied.
class TruncatedError : public FormatError {
 public:
  TruncatedError(const std::string& what, std::size_t offset)
      : FormatError(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// A record is structurally complete but its content is invalid.
class CorruptRecordError : public FormatError {
 public:
  using FormatError::FormatError;
};

}  // namespace cnxt
