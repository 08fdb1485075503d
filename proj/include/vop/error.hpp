#pragma once

#include <stdexcept>
#include <string>

namespace vop {

// Base of every error raised by the library. The CLI maps the concrete
// subclasses onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Input does not satisfy a documented precondition or type invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// A file does not start with the expected magic/version.
class FormatError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// A file has the right header but its payload is truncated or inconsistent.
class CorruptionError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// The batch sampler cannot draw from an empty category.
class SamplingError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf appeared during optimization.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace vop
