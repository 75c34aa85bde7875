#pragma once

#include <stdexcept>
#include <string>

namespace cml {

// Base of everything the library throws on purpose.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Point outside the unit interval.
class DomainError : public Error {
 public:
  using Error::Error;
};

// Grid incompatible with the branch images of a piecewise-linear map.
class AlignmentError : public Error {
 public:
  using Error::Error;
};

// Malformed configuration or violated precondition on user input.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Iterative solver ran out of iterations.
class ConvergenceError : public Error {
 public:
  using Error::Error;
};

// Consecutive eigenvectors of a tracked branch are too far apart.
class BranchTrackingError : public ConvergenceError {
 public:
  using ConvergenceError::ConvergenceError;
};

// Normalization by a non-positive variance.
class DegenerateVarianceError : public Error {
 public:
  using Error::Error;
};

// Observable reads a site the operator does not model.
class SupportError : public Error {
 public:
  using Error::Error;
};

}  // namespace cml
