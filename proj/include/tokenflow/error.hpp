#pragma once

#include <stdexcept>
#include <string>

namespace tokenflow {

// Base for every error the library raises. Callers that only need to report
// a failure can catch this; the CLI maps the subclasses onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shapes or widths that do not conform.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid argument values (k < 1, h <= 0, ...).
class ParameterError : public Error {
 public:
  using Error::Error;
};

// Inconsistent configuration (schedule vs codebook, unknown keys, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed or unreadable files, bad magic, truncated payloads.
class DataError : public Error {
 public:
  using Error::Error;
};

class EmptyCodebookError : public Error {
 public:
  using Error::Error;
};

class CorruptTokenError : public DataError {
 public:
  using DataError::DataError;
};

// Pixel values outside [0,1].
class RangeError : public Error {
 public:
  using Error::Error;
};

// Non-finite loss or values during training.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace tokenflow
