#pragma once

#include <stdexcept>
#include <string>

namespace roadseg {

class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Tensor or image shapes that do not fit together.
class DimensionError : public Error {
public:
  using Error::Error;
};

/// Invalid hyperparameters, flags or config-file contents.
class ConfigError : public Error {
public:
  using Error::Error;
};

/// Violated call contract (non-scalar loss, missing gradient, ...).
class ContractError : public Error {
public:
  using Error::Error;
};

/// A file could not be decoded.
class FormatError : public Error {
public:
  using Error::Error;
};

class VersionError : public FormatError {
public:
  using FormatError::FormatError;
};

/// A file decoded but its contents are inconsistent (CRC, truncation, shapes).
class IntegrityError : public FormatError {
public:
  using FormatError::FormatError;
};

class PairingError : public Error {
public:
  using Error::Error;
};

class BatchingError : public Error {
public:
  using Error::Error;
};

class IoError : public Error {
public:
  using Error::Error;
};

/// Training stopped on a non-finite loss.
class TrainingAbort : public Error {
public:
  using Error::Error;
};

} // namespace roadseg
