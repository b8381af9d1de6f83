#pragma once

#include <stdexcept>
#include <string>

namespace sphere {

// Error taxonomy. Exit-code mapping lives in the CLI: config errors -> 2,
// numeric errors -> 3, I/O errors -> 4.

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigMismatch : ConfigError {
    using ConfigError::ConfigError;
};

struct InvalidClass : ConfigError {
    using ConfigError::ConfigError;
};

struct InvalidAngle : ConfigError {
    using ConfigError::ConfigError;
};

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Spherification input with norm below the degeneracy threshold (1e-12).
struct DegenerateLatent : NumericError {
    using NumericError::NumericError;
};

struct NonFiniteSample : NumericError {
    using NumericError::NumericError;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct CorruptCheckpoint : IoError {
    using IoError::IoError;
};

}  // namespace sphere
