#pragma once

#include <stdexcept>
#include <string>

namespace vce {

// Dimension or length disagreement between operands.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// NaN/Inf produced or consumed by a numeric routine.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// API misuse, e.g. calling backward on a graph that was never recorded.
struct UsageError : std::logic_error {
  using std::logic_error::logic_error;
};

// File system and data problems. The CLI maps every DataError to exit code 2.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IngestError : DataError {
  using DataError::DataError;
};

struct DecodeError : DataError {
  using DataError::DataError;
};

struct SplitError : DataError {
  using DataError::DataError;
};

struct SamplingError : DataError {
  using DataError::DataError;
};

struct IoError : DataError {
  using DataError::DataError;
};

// Bad configuration values or flags (exit code 3).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Checkpoint magic/version/architecture mismatch or truncation (exit code 4).
struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace vce
