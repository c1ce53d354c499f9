#pragma once

#include <stdexcept>
#include <string>

namespace sgat {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents or ranks that do not fit an operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid hyperparameters or run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed, truncated or mismatched checkpoint/dataset files.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Files that cannot be created or written.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Inputs a transform cannot handle, e.g. normalizing a constant image.
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values in checked mode, or a NaN training loss.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Caller broke an API precondition (non-scalar loss, missing activations).
class ContractError : public Error {
 public:
  using Error::Error;
};

}  // namespace sgat
