#pragma once

#include <stdexcept>
#include <string>

namespace ann {

// Tensor shapes disagree with what an operation requires.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Non-finite input or output where a finite one is required.
class NumericError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Out-of-range operation parameter (pool size, bench iterations, ...).
class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace ann
