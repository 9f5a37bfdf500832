#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace fc {

/// Failures of a numerical procedure (as opposed to bad input).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IntegrationBlowupError : public NumericalError {
 public:
  IntegrationBlowupError(const std::string& what_state, std::uint64_t step)
      : NumericalError(what_state + " became non-finite at step " + std::to_string(step)), step_(step) {}
  std::uint64_t step() const { return step_; }

 private:
  std::uint64_t step_;
};

class AdmissibilityError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class BasisDegeneracyError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class CoverageError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

}  // namespace fc
