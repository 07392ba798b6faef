#pragma once
#include <stdexcept>
#include <string>

namespace rsmpod {

// Shape/axis disagreement between tensors or layers.
struct DimensionError : std::runtime_error {
    explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad hyperparameter or malformed run configuration.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid input data (empty string, box out of range, ...).
struct ValidationError : std::runtime_error {
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Unknown key in a cache or store.
struct LookupError : std::runtime_error {
    explicit LookupError(const std::string& msg) : std::runtime_error(msg) {}
};

// File I/O, serialization, version mismatch, corrupt records.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numerical evaluation produced NaN/Inf where finiteness is required.
struct EvalError : std::runtime_error {
    explicit EvalError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace rsmpod
