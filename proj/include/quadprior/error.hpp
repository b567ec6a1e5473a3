#pragma once

#include <stdexcept>
#include <string>

namespace quadprior {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Caller violated a precondition (empty batch, bad flag value, ...).
class UsageError : public Error {
public:
    using Error::Error;
};

/// Model or rig dimensions do not chain.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Malformed input file. The message carries the file and JSON path.
class ParseError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

/// Geometrically or statistically degenerate input (zero-length bone,
/// duplicate points, unattainable perplexity, starved rejection sampler).
class DegenerateInputError : public Error {
public:
    using Error::Error;
};

class NumericalError : public Error {
public:
    using Error::Error;
};

}  // namespace quadprior
