#pragma once

#include <stdexcept>
#include <string>

namespace advr {

// Every failure raised by the library derives from Error. The CLI maps the
// concrete category onto its exit-code contract.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Violated precondition on an argument (non-positive lr, extra == 0, ...).
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// Tensor/model shape disagreement.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Malformed or missing input data / files.
class DataError : public Error {
 public:
  using Error::Error;
};

// Bad experiment configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Non-finite value produced by a numeric procedure.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

// API misuse such as backward() before forward().
class StateError : public Error {
 public:
  using Error::Error;
};

}  // namespace advr
