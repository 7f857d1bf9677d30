#pragma once

#include <stdexcept>
#include <string>

namespace rlqr {

// Malformed or inconsistent input (dimension mismatch, non-SPD weights, bad
// config). Maps to CLI exit code 2.
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// An iterative solver failed to converge or reported a non-optimal status.
// Maps to CLI exit code 3.
class SolverError : public std::runtime_error {
 public:
  SolverError(const std::string& what, double last_residual = 0.0)
      : std::runtime_error(what), last_residual_(last_residual) {}
  double last_residual() const { return last_residual_; }

 private:
  double last_residual_;
};

// A well-posed computation hit a singular or near-singular matrix.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// The linearized optimality system at an SDP solution is (numerically)
// singular; callers should fall back to finite differences.
class DegeneracyError : public NumericalError {
 public:
  DegeneracyError(const std::string& what, double condition)
      : NumericalError(what), condition_(condition) {}
  double condition() const { return condition_; }

 private:
  double condition_;
};

// Both the implicit and the finite-difference gradient paths failed.
class GradientError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace rlqr
