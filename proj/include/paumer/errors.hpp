#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace paumer {

// Base class for all library errors.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shape mismatch (matmul inner dims, elementwise shape equality, ...).
struct ShapeError : Error {
    using Error::Error;
};

// Out-of-range gather/scatter index; carries the offending index.
struct IndexError : Error {
    IndexError(const std::string& msg, std::int64_t index)
        : Error(msg), offending_index(index) {}
    std::int64_t offending_index;
};

// API contract violation (non-scalar backward root, width mismatch in
// assemble, duplicate scatter indices, ...).
struct ContractError : Error {
    using Error::Error;
};

// Invalid user-supplied configuration (tau out of range, bad layer set,
// unknown JSON keys, ...).
struct ConfigError : Error {
    using Error::Error;
};

// Label outside [0, K) and != ignore_index.
struct InvalidLabelError : Error {
    using Error::Error;
};

// Malformed file content; carries the byte offset where parsing failed.
struct FormatError : Error {
    FormatError(const std::string& msg, std::uint64_t offset)
        : Error(msg + " (at byte " + std::to_string(offset) + ")"),
          byte_offset(offset) {}
    std::uint64_t byte_offset;
};

// Filesystem-level failure (missing file, short write, ...).
struct IoError : Error {
    using Error::Error;
};

// Non-finite loss or other numeric breakdown during training.
struct NumericError : Error {
    using Error::Error;
};

}  // namespace paumer
