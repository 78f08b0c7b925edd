#pragma once

#include <stdexcept>
#include <string>

namespace recon {

// Exit-code mapping used by the CLI: ConfigError -> 2, DataError -> 3,
// NumericalError -> 4. Everything else is a plain failure (1).

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericalError : std::runtime_error {
  explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape/contract violations inside the tensor core. These indicate caller
// bugs, not bad data, so they derive from logic_error.
struct DimensionError : std::logic_error {
  explicit DimensionError(const std::string& msg) : std::logic_error(msg) {}
};

struct StateError : std::logic_error {
  explicit StateError(const std::string& msg) : std::logic_error(msg) {}
};

}  // namespace recon
