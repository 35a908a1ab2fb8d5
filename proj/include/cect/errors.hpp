#pragma once

#include <stdexcept>
#include <string>

namespace cect {

// Error taxonomy shared across the library. The CLI maps these onto exit
// codes: ConfigError/ValidationError -> 1, ContractError/NumericError -> 2,
// IoError -> 3.

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape or extent mismatch between tensors.
class DimensionError : public Error {
public:
    using Error::Error;
};

// Invalid architecture / run configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

// Violated value-level invariant (coefficient sums, label ranges, ...).
class ValidationError : public Error {
public:
    using Error::Error;
};

// Caller broke an API precondition.
class ContractError : public Error {
public:
    using Error::Error;
};

// Non-finite value or other numeric failure.
class NumericError : public Error {
public:
    using Error::Error;
};

// Filesystem / parsing failure, reported with the offending path.
class IoError : public Error {
public:
    using Error::Error;
};

} // namespace cect
