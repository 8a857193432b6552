#pragma once

#include <stdexcept>
#include <string>

namespace sentinet {

// Base of every error the library throws. Each subclass maps onto one
// failure category of the command-line front end.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

class ParameterError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Non-finite loss during training.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace sentinet
