#pragma once

#include <stdexcept>
#include <string>

namespace granflow {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Bad configuration, bad usage or unreadable input. Maps to exit code 2.
class ConfigError : public Error {
public:
    using Error::Error;
};

// Instability, divergence or non-finite values. Maps to exit code 3.
class NumericError : public Error {
public:
    using Error::Error;
};

class ShapeError : public ConfigError {
public:
    using ConfigError::ConfigError;
};

}  // namespace granflow
