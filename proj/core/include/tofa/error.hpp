// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace tofa {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that cannot be combined.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// An operation was configured with inconsistent parameters.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A precondition of an operation was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf encountered where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, int line)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  int line() const noexcept { return line_; }

 private:
  int line_;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Malformed binary file (bad magic, truncation).
class FormatError : public Error {
 public:
  using Error::Error;
};

class IncompatibleCheckpoint : public Error {
 public:
  using Error::Error;
};

/// No ledger entry satisfies the requested budget.
class InfeasibleBudget : public Error {
 public:
  InfeasibleBudget(const std::string& what, double min_available)
      : Error(what), min_available_(min_available) {}
  double min_available() const noexcept { return min_available_; }

 private:
  double min_available_;
};

class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace tofa
