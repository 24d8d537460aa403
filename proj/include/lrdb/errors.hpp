#pragma once

#include <stdexcept>
#include <string>

namespace lrdb {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes that cannot be combined (conv channel mismatch, linear width mismatch, ...).
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A caller broke an operation's precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Out-of-range hyperparameter (temperature, alpha, ...).
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// Malformed network specification string.
class ParseError : public Error {
 public:
  ParseError(const std::string& message, std::size_t position)
      : Error(message + " (at position " + std::to_string(position) + ")"), position_(position) {}
  std::size_t position() const noexcept { return position_; }

 private:
  std::size_t position_;
};

/// Well-formed specification that violates the layer-count rules.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Corrupt or truncated on-disk data (dataset, checkpoint, config).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss or failed gradient check.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace lrdb
