#pragma once

#include <stdexcept>
#include <string>

namespace crlab {

// Shapes of two operands do not agree.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Input is valid in shape but numerically unusable (zero norm, single cluster).
class DegenerateInputError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

// Bad hyperparameter, missing or unknown config key.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Bad labels or malformed dataset files.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// A function handed to an oracle returned NaN/Inf.
class PropagationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Training produced a non-finite loss. Carries a JSON snapshot of the step.
class NonFiniteLossError : public std::runtime_error {
public:
    NonFiniteLossError(const std::string& what, std::string snapshot_json)
        : std::runtime_error(what), snapshot_(std::move(snapshot_json)) {}

    const std::string& snapshot() const noexcept { return snapshot_; }

private:
    std::string snapshot_;
};

}  // namespace crlab
