#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace offseg {

/// Base for every failure raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not fit the operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced or consumed, or an iterative routine failed to converge.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Rejected configuration or argument value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed file content. `offset()` is a byte offset for binary files and a
/// 1-based line number for text files.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : Error(what), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// File missing or unreadable/unwritable.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace offseg
