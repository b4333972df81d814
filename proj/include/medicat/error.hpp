#pragma once

#include <stdexcept>
#include <string>

namespace medicat {

// Base of every error the library raises. The CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

// Caller broke an API precondition (non-scalar backward, missing gradient, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Invalid hyperparameter or model configuration. `field` names the offending knob.
class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& what)
      : Error(field.empty() ? what : field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

// Contrastive term saw a collapsed (zero-norm) embedding column.
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

// Loss went NaN/inf during training.
class NumericDivergence : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

enum class DataErrorKind {
  missing_file,
  count_mismatch,
  label_range,
  malformed_descriptor,
  size_mismatch,
};

class DataError : public Error {
 public:
  DataError(DataErrorKind kind, const std::string& what) : Error(what), kind_(kind) {}
  DataErrorKind kind() const noexcept { return kind_; }

 private:
  DataErrorKind kind_;
};

enum class CheckpointErrorKind { bad_magic, bad_version, bad_offset, malformed };

class CheckpointError : public Error {
 public:
  CheckpointError(CheckpointErrorKind kind, const std::string& what) : Error(what), kind_(kind) {}
  CheckpointErrorKind kind() const noexcept { return kind_; }

 private:
  CheckpointErrorKind kind_;
};

}  // namespace medicat
