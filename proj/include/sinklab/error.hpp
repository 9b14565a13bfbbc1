#pragma once

#include <stdexcept>
#include <string>

namespace sinklab {

// Base class for every error the library throws. Each subclass maps onto one
// failure category so callers (the CLI in particular) can translate it into
// an exit code without string matching.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// A softmax row whose every logit is masked.
class DegenerateRow : public Error {
 public:
  using Error::Error;
};

// cosine / projection against a zero-norm vector.
class ZeroDirection : public Error {
 public:
  using Error::Error;
};

// pearson on a constant sequence.
class UndefinedCorrelation : public Error {
 public:
  using Error::Error;
};

// Malformed weight file or report document.
class SchemaError : public Error {
 public:
  using Error::Error;
};

// Non-finite intermediate during a forward pass.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Decode cache does not match the model it is used with.
class InvalidState : public Error {
 public:
  using Error::Error;
};

// Invalid run / intervention configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace sinklab
