#pragma once

#include <stdexcept>
#include <string>

namespace parseq {

// All library failures derive from Error so callers can catch one type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

class NumericDomainError : public Error {
 public:
  using Error::Error;
};

// Non-finite state encountered. `where` is the timestep (rollout) or the
// iteration index (solvers), -1 when unknown.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, long where = -1)
      : Error(what), where_(where) {}
  long where() const noexcept { return where_; }

 private:
  long where_;
};

class AdjointError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

class SchemaError : public Error {
 public:
  using Error::Error;
};

class InsufficientDataError : public Error {
 public:
  using Error::Error;
};

}  // namespace parseq
