#pragma once

#include <stdexcept>
#include <string>

namespace vfm {

/// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shapes or dimensions that do not line up.
class StructuralError : public Error {
 public:
  using Error::Error;
};

/// API used out of order or with the wrong kind of object.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Invalid or inconsistent configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Input data violates a contract (non one-hot target, empty set, ...).
class DataError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf or divergence detected during computation.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// File format problems: bad magic, unsupported version, truncated payload.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace vfm
