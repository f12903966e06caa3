#pragma once

#include <stdexcept>
#include <string>

namespace mop {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error(what + " (line " + std::to_string(line) + ")"), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class LookupError : public Error { using Error::Error; };
class ValidationError : public Error { using Error::Error; };
class SamplingError : public Error { using Error::Error; };
class DimensionError : public Error { using Error::Error; };
class NumericalError : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };
class RoutingError : public Error { using Error::Error; };
class StageError : public Error { using Error::Error; };

}  // namespace mop
