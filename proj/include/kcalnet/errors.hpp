#pragma once

#include <stdexcept>
#include <string>

namespace kcalnet {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible with the requested operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A scalar or list argument is outside the operation's domain.
class ArgumentError : public Error {
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

/// Metadata ingestion produced no usable rows, or a required column is absent.
class DatasetError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

/// Two prediction sets do not cover the same dish ids.
class PairingError : public Error {
 public:
  using Error::Error;
};

/// Paired differences have zero spread, so the t statistic is undefined.
class DegenerateVarianceError : public Error {
 public:
  using Error::Error;
};

}  // namespace kcalnet
