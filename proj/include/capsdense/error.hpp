#pragma once

#include <stdexcept>
#include <string>

namespace capsdense {

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape or axis disagreement between tensors.
struct DimensionError : Error {
  using Error::Error;
};

// Caller broke an API precondition.
struct ContractError : Error {
  using Error::Error;
};

// Invalid model or run configuration.
struct ConfigError : Error {
  using Error::Error;
};

// Malformed data file; message carries the byte offset where parsing failed.
struct FormatError : Error {
  using Error::Error;
};

// Checksum mismatch or truncated binary payload.
struct IntegrityError : Error {
  using Error::Error;
};

// Non-finite values or a tolerance breach.
struct NumericalError : Error {
  using Error::Error;
};

}  // namespace capsdense
