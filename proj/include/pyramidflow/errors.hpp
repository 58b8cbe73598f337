#pragma once

#include <stdexcept>
#include <string>

namespace pyramidflow {

/// Base of every error raised by the library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

/// Operation called in the wrong lifecycle state (e.g. backward before forward).
struct StateError : Error {
    using Error::Error;
};

struct NumericError : Error {
    using Error::Error;
};

/// Metric undefined for the given labels (single class, empty mask).
struct MetricError : Error {
    using Error::Error;
};

/// Malformed file content: bad magic, truncated payload, CRC mismatch.
struct FormatError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

}  // namespace pyramidflow
