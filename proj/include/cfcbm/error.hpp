#pragma once

#include <stdexcept>
#include <string>

namespace cfcbm {

/// Base class for every error raised by the engine.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

class ParameterError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

/// Malformed or truncated binary file (bad magic, version, short read).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Well-formed file whose values violate the data invariants.
class CorruptDataError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class ArityError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class CoverageError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class DivergenceError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace cfcbm
