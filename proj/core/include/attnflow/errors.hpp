#pragma once

#include <stdexcept>
#include <string>

namespace attnflow {

// Base class for every error the library raises.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Tensor/matrix extents do not line up.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Mathematical domain violations: log of a non-positive value, division by zero.
class DomainError : public Error {
public:
    using Error::Error;
};

// A NaN or Inf surfaced from an operation, or an optimizer step went non-finite.
class NumericalError : public Error {
public:
    using Error::Error;
};

// LU factorization hit a pivot below threshold; pivot_index names the column.
class SingularMatrixError : public NumericalError {
public:
    SingularMatrixError(const std::string& msg, int pivot)
        : NumericalError(msg), pivot_index(pivot) {}
    int pivot_index;
};

// Malformed file contents (IDX, checkpoint, PGM, CSV).
class FormatError : public Error {
public:
    using Error::Error;
};

// Dataset-level problems: missing files, mismatched shapes at the data boundary.
class DataError : public Error {
public:
    using Error::Error;
};

// Bad configuration or command-line usage.
class ConfigError : public Error {
public:
    using Error::Error;
};

// Unreadable or unwritable paths.
class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace attnflow
