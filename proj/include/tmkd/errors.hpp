// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace tmkd {

/// Shapes of operands do not agree.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// NaN input, non-positive logarithm argument, near-zero norm, divergence.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A documented precondition of an operation was violated.
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Training produced a non-finite loss.
class DivergenceError : public NumericError {
 public:
  DivergenceError(const std::string& what, std::size_t epoch)
      : NumericError(what + " (epoch " + std::to_string(epoch) + ")"), epoch_(epoch) {}
  std::size_t epoch() const noexcept { return epoch_; }

 private:
  std::size_t epoch_;
};

/// Invalid configuration value (even kernel, k > C, bad schedule, ...).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Missing key in a keyed table (embedding lookups).
class LookupError : public std::out_of_range {
 public:
  explicit LookupError(const std::string& key)
      : std::out_of_range("missing key: " + key), key_(key) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

/// Malformed binary input. `offset` is the byte offset (or record index,
/// for record-oriented formats) at which parsing failed.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// Well-formed input using a feature this code does not implement
/// (e.g. 16-bit PPM).
class UnsupportedFormat : public ParseError {
 public:
  using ParseError::ParseError;
};

}  // namespace tmkd
