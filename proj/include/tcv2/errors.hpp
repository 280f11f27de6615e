#pragma once

#include <stdexcept>
#include <string>

namespace tcv2 {

// Root of every error the library throws. Subclasses name the failing
// contract so callers (and the CLI exit-code mapping) can tell them apart.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Input that violates a documented contract: bad config, bad file, bad label.
// The CLI maps these to exit code 1.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ContractError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ConfigError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class LabelError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class RegistryError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class DataError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class CheckpointError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class MetricUndefinedError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ExportError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class CoherenceError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Argument outside the domain of a pure calculation (e.g. negative hours).
class DomainError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Failures that happen while computing. Exit code 2 in the CLI.
class NumericDomainError : public Error {
 public:
  using Error::Error;
};

class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace tcv2
