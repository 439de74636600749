#pragma once

#include <stdexcept>
#include <string>

namespace vlgen {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent input data (exit code 2 on the CLI).
class DataError : public Error {
 public:
  using Error::Error;
};

class EmptyDataset : public DataError {
 public:
  EmptyDataset() : DataError("dataset has no records") {}
};

class RaggedDataset : public DataError {
 public:
  using DataError::DataError;
};

class SchemaMismatch : public DataError {
 public:
  using DataError::DataError;
};

class TooLong : public DataError {
 public:
  TooLong(std::size_t length, std::size_t max_len)
      : DataError("sequence of length " + std::to_string(length) +
                  " does not fit max_len " + std::to_string(max_len) +
                  " (one slot is reserved for EOS)"),
        length(length),
        max_len(max_len) {}
  std::size_t length;
  std::size_t max_len;
};

class BadIndex : public DataError {
 public:
  using DataError::DataError;
};

class NoTrainableData : public DataError {
 public:
  NoTrainableData() : DataError("no training pair fits within max_len") {}
};

class EmptyBatch : public DataError {
 public:
  EmptyBatch() : DataError("cannot score an empty batch") {}
};

class EmptyConfiguration : public DataError {
 public:
  using DataError::DataError;
};

class DimensionMismatch : public Error {
 public:
  using Error::Error;
};

class MissingAlignment : public Error {
 public:
  MissingAlignment() : Error("hypothesis was decoded without attention recording") {}
};

/// Checkpoint framing, version or shape problems (exit code 3 on the CLI).
class CorruptCheckpoint : public Error {
 public:
  using Error::Error;
};

}  // namespace vlgen
