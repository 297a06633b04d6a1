#pragma once

#include <stdexcept>
#include <string>

namespace mmil {

// Base class for everything this library throws on purpose.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor shape disagreement (matmul inner dims, channel widths, ...).
struct DimensionError : Error {
    using Error::Error;
};

// Invalid configuration (bad sub-bag counts, mask ratios, split ratios, flags).
struct ConfigError : Error {
    using Error::Error;
};

// Malformed or impossible input data (zero-norm rows, bad labels, small bags).
struct DataError : Error {
    using Error::Error;
};

// A library precondition was violated by the caller.
struct ContractError : Error {
    using Error::Error;
};

// Training-time failure (NaN loss, NaN gradient).
struct TrainingError : Error {
    using Error::Error;
};

// Metric is undefined for the given inputs (e.g. single-class AUC).
struct MetricError : Error {
    using Error::Error;
};

// Unreadable or truncated file.
struct ParseError : Error {
    using Error::Error;
};

}  // namespace mmil
