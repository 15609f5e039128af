#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mf {

// Error taxonomy for the whole library. Every documented failure mode maps to
// one of these types; callers can catch the base Error for blanket handling.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor/operand shapes incompatible with the requested operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration value (grid sizes, strides, CLI options, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf encountered, or a computation that cannot be normalized.
class NumericsError : public Error {
 public:
  using Error::Error;
};

// A query point outside the image extent.
class OutOfBoundsError : public Error {
 public:
  using Error::Error;
};

// Filesystem / codec failures.
class IoError : public Error {
 public:
  using Error::Error;
};

// Semantically invalid input data (e.g. annotation outside the image).
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Malformed serialized artifact. Carries the byte offset where parsing failed
// when it is known (npos otherwise).
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& msg,
                       std::size_t byte_offset = std::string::npos)
      : Error(byte_offset == std::string::npos
                  ? msg
                  : msg + " (byte offset " + std::to_string(byte_offset) + ")"),
        byte_offset(byte_offset) {}

  std::size_t byte_offset;
};

// A mesh cell whose deformed quad cannot support a homography. Row/col are
// cell indices when known, -1 otherwise.
class DegenerateCellError : public Error {
 public:
  explicit DegenerateCellError(const std::string& msg, int row = -1,
                               int col = -1)
      : Error(row >= 0 ? msg + " (cell " + std::to_string(row) + "," +
                             std::to_string(col) + ")"
                       : msg),
        cell_row(row),
        cell_col(col) {}

  int cell_row;
  int cell_col;
};

}  // namespace mf
