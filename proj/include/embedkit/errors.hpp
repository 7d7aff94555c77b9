#pragma once

#include <stdexcept>
#include <string>

namespace embedkit {

// Base class for every failure the toolkit raises. The CLI maps any Error
// to a nonzero exit code with the message on stderr.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape or rank mismatch between tensor operands.
struct DimensionError : Error {
  using Error::Error;
};

// NaN/Inf produced by a forward op, log of a non-positive value,
// zero-norm embeddings, and similar numeric degeneracies.
struct NumericError : Error {
  using Error::Error;
};

// Invalid configuration values (temperatures, ratios, weights, stage setup).
struct ConfigError : Error {
  using Error::Error;
};

// Malformed or empty input data; messages carry file/line context.
struct DataError : Error {
  using Error::Error;
};

// Filesystem and serialization failures.
struct IoError : Error {
  using Error::Error;
};

}  // namespace embedkit
