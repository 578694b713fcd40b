#pragma once

#include <stdexcept>
#include <string>

namespace dsd {

// Base class for all library failures. CLI maps these to exit codes.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor/graph shape disagreement, invalid layouts, bad indices.
struct ShapeError : Error {
  using Error::Error;
};

// NaN/Inf encountered where finite values are required.
struct NumericError : Error {
  using Error::Error;
};

// File format violations and I/O failures.
struct IoError : Error {
  using Error::Error;
};

}  // namespace dsd
