#pragma once

#include <stdexcept>
#include <string>

namespace nmg {

// Base for every error raised by the library. Subclasses map onto the CLI
// exit codes: config/usage -> 1, data validation -> 2, numeric -> 3.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace nmg
