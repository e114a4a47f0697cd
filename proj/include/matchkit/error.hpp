#pragma once

// Exception hierarchy. Each category maps onto a process exit code used by
// the command line tool: configuration problems exit 2, bad input data exits
// 3 and numerical failures (separation, infeasibility, degeneracy) exit 4.

#include <stdexcept>
#include <string>

namespace matchkit {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    virtual int exit_code() const noexcept { return 1; }
};

// File could not be read or written.
class IoError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 2; }
};

class DataError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 3; }
};

class NumericalError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 4; }
};

// Maximum likelihood estimate does not exist.
class SeparationError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

// Flow network or matching constraints cannot be satisfied.
class InfeasibleError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

// Inputs collapse the statistic (zero variance, zero scale, constant response).
class DegenerateError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

} // namespace matchkit
