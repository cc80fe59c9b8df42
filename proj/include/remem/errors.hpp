#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace remem {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// wrong tensor/matrix dimensions; messages name both shapes
struct ShapeError : Error {
  using Error::Error;
};

// invalid argument or hyperparameter value
struct ParamError : Error {
  using Error::Error;
};

// numeric-domain violation (probability outside [0,1] etc.)
struct DomainError : Error {
  using Error::Error;
};

// API misuse: backward on an off-tape root, missing grads, frozen-state abuse
struct UsageError : Error {
  using Error::Error;
};

// non-finite loss or other numeric failure while training
struct NumericError : Error {
  using Error::Error;
};

// enumeration guards (brute-force bipartitions, empirical MI support)
struct SizeError : Error {
  using Error::Error;
};

// degenerate input that leaves an analysis undefined (all inputs skipped)
struct DegenerateError : Error {
  using Error::Error;
};

// a class is too small to divide across splits
struct StratificationError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};
struct BadMagicError : IoError {
  using IoError::IoError;
};
struct BadVersionError : IoError {
  using IoError::IoError;
};
struct TruncatedFileError : IoError {
  using IoError::IoError;
};
// file parses but contradicts the expected schema (tensor names/shapes, label ranges)
struct SchemaError : IoError {
  using IoError::IoError;
};

struct ConfigError : Error {
  using Error::Error;
};

inline std::string shape_str(const std::vector<std::size_t>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += " x ";
    out += std::to_string(s[i]);
  }
  out += "]";
  return out;
}

}  // namespace remem
