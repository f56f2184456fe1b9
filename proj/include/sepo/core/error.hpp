#pragma once

#include <stdexcept>
#include <string>

namespace sepo {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes.
class DimensionError : public Error {
  public:
    using Error::Error;
};

/// NaN/Inf where finite values are required.
class NumericError : public Error {
  public:
    using Error::Error;
};

/// Bad input data, bad config, broken invariants in a file. Maps to exit code 2.
class ValidationError : public Error {
  public:
    using Error::Error;
};

/// Misuse of the library API (double backward, empty selection mask, ...).
class UsageError : public Error {
  public:
    using Error::Error;
};

/// Training produced a non-finite loss. Maps to exit code 3.
class DivergenceError : public Error {
  public:
    using Error::Error;
};

} // namespace sepo
