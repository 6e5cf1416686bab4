#pragma once

#include <stdexcept>
#include <string>

namespace foci {

// Thrown on malformed flags, out-of-range settings, impossible requests.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Thrown on unreadable / corrupt inputs (bag files, checkpoints, manifests).
struct DataError : std::runtime_error {
    explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

// Thrown when a computation produces or receives a non-finite value, or the
// engine is asked to do something numerically invalid.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

} // namespace foci
