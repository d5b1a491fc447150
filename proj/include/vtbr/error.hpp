#pragma once

#include <stdexcept>
#include <string>

namespace vtbr {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed input file; message carries the 1-based line number.
struct ParseError : Error {
    using Error::Error;
};

// Record or template does not match the declared attribute schema.
struct SchemaViolation : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

struct DimensionError : Error {
    using Error::Error;
};

// NaN/Inf showed up in gradients or loss.
struct DivergenceError : Error {
    using Error::Error;
};

// Retrieval protocol cannot be satisfied (e.g. a query with no valid gallery).
struct ProtocolError : Error {
    using Error::Error;
};

struct CheckpointError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

}  // namespace vtbr
