#pragma once

#include <stdexcept>
#include <string>

namespace tact {

// Base type for all library failures; subtypes map to CLI exit codes.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor extents disagree (names both shapes in the message).
struct ShapeError : Error {
  using Error::Error;
};

// Invalid or contradictory configuration / usage.
struct ConfigError : Error {
  using Error::Error;
};

// File format or parse failure (byte offset / line number in the message).
struct ParseError : Error {
  using Error::Error;
};

// NaN/Inf detected, or a numeric contract violated (e.g. missing gradients).
struct NumericError : Error {
  using Error::Error;
};

}  // namespace tact
