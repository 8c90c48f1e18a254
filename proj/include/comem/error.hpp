#pragma once

#include <stdexcept>
#include <string>

namespace comem {

/// Root of every error raised by the library. The CLI maps the concrete
/// subclasses onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not conform.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A temporal geometry (length, stride, padding, target length) is not realizable.
class GeometryError : public Error {
 public:
  using Error::Error;
};

/// An argument lies outside the domain of the operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Token id not present in the vocabulary.
class VocabularyError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent file contents.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Incompatible configuration, e.g. evaluating a checkpoint on another task.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss or a failed numerical check.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace comem
