#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace dualtrack {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid configuration value; `field` names the offending key.
struct ConfigError : Error {
  ConfigError(std::string field, const std::string& what)
      : Error(field + ": " + what), field(std::move(field)) {}
  std::string field;
};

// Malformed input text, with the 1-based line it occurred on.
struct ParseError : Error {
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line(line) {}
  std::size_t line;
};

struct KbError : Error {
  using Error::Error;
};

// The surface form is already bound to an entity of the requested category.
struct AlreadyKnown : KbError {
  using KbError::KbError;
};

struct ZeroProbabilityObservation : Error {
  using Error::Error;
};

struct NotFound : Error {
  using Error::Error;
};

struct SessionTerminated : Error {
  using Error::Error;
};

}  // namespace dualtrack
