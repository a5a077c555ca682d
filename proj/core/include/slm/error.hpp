#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace slm {

/// Base class for every recoverable error raised by this library.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Invalid or inconsistent configuration values.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// A request exceeds what the configured space can provide
/// (e.g. more lexicon entries than distinct phoneme strings).
class CapacityError : public Error {
public:
    using Error::Error;
};

/// An argument is outside its documented range.
class RangeError : public Error {
public:
    using Error::Error;
};

/// Shape or vocabulary-layout mismatch between two components.
class LayoutError : public Error {
public:
    using Error::Error;
};

/// Malformed persisted data. `byte_offset` points at the offending
/// byte when known, -1 otherwise.
class FormatError : public Error {
public:
    explicit FormatError(const std::string& what, std::int64_t byte_offset = -1)
        : Error(what), byte_offset(byte_offset) {}
    std::int64_t byte_offset;
};

/// A token sequence violates the cyclic quantizer-level layout.
/// `interior_index` is the first offending 0-based interior position.
class OrderError : public Error {
public:
    OrderError(const std::string& what, std::int64_t interior_index)
        : Error(what), interior_index(interior_index) {}
    std::int64_t interior_index;
};

/// Quantizer fitting cannot proceed (degenerate input).
class FitError : public Error {
public:
    using Error::Error;
};

/// A data item fails a pipeline contract (message names the item).
class DataError : public Error {
public:
    using Error::Error;
};

/// Filesystem failure; message includes the path.
class IoError : public Error {
public:
    using Error::Error;
};

/// HTTP transport failure after retries.
class HttpError : public Error {
public:
    using Error::Error;
};

/// A remote response that cannot be interpreted.
class ParseError : public Error {
public:
    using Error::Error;
};

}  // namespace slm
