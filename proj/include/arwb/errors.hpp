#pragma once

#include <stdexcept>
#include <string>

namespace arwb {

// Shape or rank mismatch between operands.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// A documented precondition was violated by the caller.
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

struct IndexError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

// Malformed checkpoint, image or report file.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad command-line usage: unknown names, empty requests.
struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ContractError(what);
}

}  // namespace arwb
