#pragma once

#include <stdexcept>
#include <string>

namespace layerforge {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shapes or sizes that do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Bad user input: config, prompt file, argument ranges.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Malformed or inconsistent file contents.
class FormatError : public Error {
 public:
  using Error::Error;
};

class CheckpointNotFound : public Error {
 public:
  using Error::Error;
};

// NaN/Inf encountered where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace layerforge
