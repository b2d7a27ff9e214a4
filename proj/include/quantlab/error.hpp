#pragma once

#include <stdexcept>
#include <string>

namespace quantlab {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes or dimension mismatches.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A value outside the domain an operation accepts (bad levels, off-grid codes, ...).
class DomainError : public Error {
public:
    using Error::Error;
};

/// Invalid or unknown configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Training diverged or otherwise failed.
class TrainingError : public Error {
public:
    using Error::Error;
};

/// Malformed bitstream or a model that cannot code a symbol.
class CodecError : public Error {
public:
    using Error::Error;
};

/// File-level I/O failures.
class IoError : public Error {
public:
    using Error::Error;
};

} // namespace quantlab
