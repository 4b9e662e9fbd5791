#pragma once

#include <stdexcept>
#include <string>

namespace mrtint {

// Base for all library errors.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct DimensionError : Error {
  using Error::Error;
};

// Dataset-level validation failure (positivity, ordering, empty arm, ...).
struct ValidationError : Error {
  using Error::Error;
};

// Logistic-type MLE does not exist / diverges.
struct SeparationError : Error {
  using Error::Error;
};

struct NonConvergenceError : Error {
  using Error::Error;
};

// Rank-deficient design in a least-squares stage.
struct SingularNormalEquationsError : Error {
  using Error::Error;
};

// Bread matrix of the sandwich is not invertible.
struct SingularBreadError : Error {
  using Error::Error;
};

struct NotPositiveDefiniteError : Error {
  using Error::Error;
};

struct UnobservedLevelError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

}  // namespace mrtint
