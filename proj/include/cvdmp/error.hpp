#pragma once

#include <stdexcept>
#include <string>

namespace cvdmp {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad arguments or configuration values. CLI exit code 1.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent input data. CLI exit code 2.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values or a diverging computation. CLI exit code 3.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class CheckpointVersionError : public DataError {
 public:
  using DataError::DataError;
};

class ChecksumError : public DataError {
 public:
  using DataError::DataError;
};

class TruncatedFileError : public DataError {
 public:
  using DataError::DataError;
};

}  // namespace cvdmp
