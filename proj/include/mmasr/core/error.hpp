#pragma once

#include <stdexcept>
#include <string>

namespace mmasr {

// Root of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

// Optimizer state does not match the parameters it is applied to.
class StateError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// A manifest record violates a data-model invariant.
class ValidationError : public Error {
 public:
  ValidationError(std::string record, const std::string& what)
      : Error(record + ": " + what), record_(std::move(record)) {}
  const std::string& record() const { return record_; }

 private:
  std::string record_;
};

class MalformedRecordError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class DanglingReferenceError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class LengthMismatchError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class InputTooShortError : public Error {
 public:
  using Error::Error;
};

class IncompatibleCheckpointError : public Error {
 public:
  using Error::Error;
};

class UnsupportedVariantError : public Error {
 public:
  using Error::Error;
};

class DivergenceError : public Error {
 public:
  using Error::Error;
};

class LookupError : public Error {
 public:
  using Error::Error;
};

}  // namespace mmasr
