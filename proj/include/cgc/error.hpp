#pragma once

#include <stdexcept>
#include <string>

namespace cgc {

// Precondition or argument violation by the caller.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// NaN/Inf encountered, or a numerically undefined quantity was requested.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Unreadable, malformed, missing, or stale artifact file.
class ArtifactError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// The allocation problem has no feasible solution.
class InfeasibleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace cgc
