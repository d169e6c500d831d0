#pragma once

#include <stdexcept>
#include <string>

namespace hear {

// Base for every error raised by the library. Callers that only care about
// failure can catch this; the subclasses name the category.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A precondition on shapes or call order was broken by the caller.
class ContractViolation : public Error {
 public:
  using Error::Error;
};

// Bad user data: out-of-vocabulary ids, empty sentences, length mismatches.
class InputError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Stream grew past the model's maximum length.
class CapacityError : public Error {
 public:
  using Error::Error;
};

// NaN or infinity where a finite value is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error(what + " (line " + std::to_string(line) + ")"), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

namespace detail {

[[noreturn]] inline void contract_fail(const std::string& what) {
  throw ContractViolation(what);
}

inline void require(bool ok, const char* what) {
  if (!ok) contract_fail(what);
}

}  // namespace detail
}  // namespace hear
