#pragma once

#include <stdexcept>
#include <string>

namespace phydi {

/// Base of every error the library raises.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes, axis out of range, non-divisible dimensions.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Invalid configuration value or combination.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Missing files and OS-level read/write failures.
class IoError : public Error {
public:
    using Error::Error;
};

/// Malformed on-disk content: truncated files, bad magic, version mismatch.
class FormatError : public Error {
public:
    using Error::Error;
};

/// A precondition of a training/metric routine was violated.
class ContractError : public Error {
public:
    using Error::Error;
};

}  // namespace phydi
