#pragma once

#include <stdexcept>
#include <string>

namespace duet {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor shape / dimension mismatches.
struct ShapeError : Error {
  using Error::Error;
};

// Contract violations (non-scalar backward, degenerate softmax row, ...).
struct ValueError : Error {
  using Error::Error;
};

// Vocabulary and segmentation failures.
struct TokenError : Error {
  using Error::Error;
};

// SMILES parse failures. check_validity converts these into a report
// instead of letting them escape.
struct ParseError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

struct TrainError : Error {
  using Error::Error;
};

}  // namespace duet
