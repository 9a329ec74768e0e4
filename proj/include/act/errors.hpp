#pragma once

#include <stdexcept>
#include <string>

namespace act {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor extents do not line up (matmul inner dims, concat ranks, ...).
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A value passed to an operation is out of its domain (tau <= 0, k > N, ...).
class ArgumentError : public Error {
 public:
  using Error::Error;
};

// A run configuration failed validation before any work started.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

// Bad magic or unsupported format version.
class CheckpointFormatError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

// File ended before the advertised payload.
class CheckpointTruncatedError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

// Tensor names/shapes in the file do not match the receiving model.
class CheckpointMismatchError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

}  // namespace act
