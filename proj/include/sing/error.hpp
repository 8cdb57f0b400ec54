#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace sing {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Filesystem or stream failure.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed input: a violated data invariant, a schema problem, or a
/// dimension mismatch. `invariant()` is a stable machine-readable name.
class ValidationError : public Error {
 public:
  ValidationError(std::string invariant, const std::string& detail)
      : Error(invariant + ": " + detail), invariant_(std::move(invariant)) {}

  const std::string& invariant() const noexcept { return invariant_; }

 private:
  std::string invariant_;
};

/// A computation that cannot produce a meaningful result (singular system,
/// zero-norm vector, failed calibration, ...).
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace sing
