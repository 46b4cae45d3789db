#pragma once

#include <stdexcept>
#include <string>

namespace deq {

// Shape or extent mismatch between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Argument outside the mathematical domain of an operation.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Invalid hyperparameters or architecture settings.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ExtractionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class SolverError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class BackwardError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed file contents (sizes, magic numbers, versions).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A sidecar or config document is missing a required field.
class SchemaError : public FormatError {
 public:
  using FormatError::FormatError;
};

}  // namespace deq
