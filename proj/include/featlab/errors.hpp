#pragma once

#include <stdexcept>
#include <string>

namespace featlab {

// Base of every error raised by the library. The CLI maps the concrete
// subclass onto a process exit code.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Invalid configuration value or inconsistent parameter block.
class ConfigError : public Error {
public:
    using Error::Error;
};

// Vector / matrix dimensions do not agree.
class ShapeError : public Error {
public:
    using Error::Error;
};

// An operation was called outside its contract (bad index, empty input,
// missing upstream artifact).
class PreconditionError : public Error {
public:
    using Error::Error;
};

// NaN / Inf encountered, or a quantity that is mathematically undefined.
class NumericError : public Error {
public:
    using Error::Error;
};

// Interpreter service unreachable after retries.
class TransportError : public Error {
public:
    using Error::Error;
};

// Interpreter service answered with something we cannot parse.
class ProtocolError : public Error {
public:
    using Error::Error;
};

#define FEATLAB_CHECK(cond, ExcType, msg)              \
    do {                                               \
        if (!(cond)) throw ExcType(std::string(msg));  \
    } while (0)

} // namespace featlab
