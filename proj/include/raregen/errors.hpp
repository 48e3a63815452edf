#pragma once

#include <stdexcept>
#include <string>

namespace raregen {

// Violated precondition or malformed input.
class ContractViolation : public std::invalid_argument {
 public:
  explicit ContractViolation(const std::string& what) : std::invalid_argument(what) {}
};

// Non-finite values, failed factorizations, and similar runtime numeric faults.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

class SingularMatrixError : public NumericError {
 public:
  explicit SingularMatrixError(const std::string& what) : NumericError(what) {}
};

class TrainingError : public NumericError {
 public:
  TrainingError(const std::string& what, long iteration)
      : NumericError(what + " (iteration " + std::to_string(iteration) + ")"),
        iteration_(iteration) {}
  long iteration() const { return iteration_; }

 private:
  long iteration_;
};

// Reference whose penalizing boundary collapsed to ~0; such references are rejected.
class DegenerateBoundaryError : public std::runtime_error {
 public:
  explicit DegenerateBoundaryError(const std::string& what) : std::runtime_error(what) {}
};

class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace raregen
