#pragma once

#include <stdexcept>
#include <string>

namespace stlab {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents do not satisfy an operation's contract.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A NaN or infinity surfaced where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed input files, configuration or arguments.
class InputError : public Error {
 public:
  using Error::Error;
};

/// A file could not be opened, read or written.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace stlab
