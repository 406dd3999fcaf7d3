#pragma once

#include <stdexcept>
#include <string>

namespace cdg {

// Base of every error thrown by the library. Callers that only need a message
// can catch std::runtime_error.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor or argument extents do not agree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// An argument is outside the domain of the operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

// An object was used in the wrong lifecycle state (e.g. backward before forward).
class StateError : public Error {
 public:
  using Error::Error;
};

// A configuration file or value failed validation.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A persisted artifact could not be decoded.
class ParseError : public Error {
 public:
  using Error::Error;
};

// A loss term or metric evaluated to NaN/inf. `term` names the offending value.
class NonFiniteError : public Error {
 public:
  NonFiniteError(std::string term, const std::string& what)
      : Error(what), term_(std::move(term)) {}

  const std::string& term() const noexcept { return term_; }

 private:
  std::string term_;
};

}  // namespace cdg
