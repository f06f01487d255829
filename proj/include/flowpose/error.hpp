#pragma once

#include <stdexcept>
#include <string>

namespace flowpose {

enum class ErrorKind {
  // validation
  Config,
  Load,
  Shape,
  Contract,
  InvalidRotation,
  InvalidFrame,
  InvalidRig,
  Quota,
  Underdetermined,
  BehindCamera,
  // numerical
  NearCutLocus,
  DegenerateProjection,
  DegenerateMean,
  Domain,
  NonFinite,
  NotSpd,
  NonConvergence,
  SolverFailure,
  Divergence,
  Alignment,
  TrainingAborted,
};

const char* to_string(ErrorKind kind);

// Numerical failures map to CLI exit code 2, everything else to 1.
bool is_numerical(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace flowpose
