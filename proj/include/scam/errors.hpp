#pragma once

#include <stdexcept>
#include <string>

namespace scam {

/// Shape or axis mismatch between operands.
class DimensionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A precondition of an operation was violated (non-scalar backward root, NaN input, ...).
class ContractError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid experiment, split or model configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dataset or checkpoint could not be read.
class LoadError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace scam
