#pragma once

#include <stdexcept>
#include <string>

namespace tinydistill {

// Base class for every error the library throws deliberately.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Tensor shape / dimension disagreement. Messages name both shapes.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Invalid argument value (non-positive temperature, probability out of
// range, numeric overflow, ...).
class ValueError : public Error {
public:
    using Error::Error;
};

// Malformed input file. Messages carry a 1-based line number or byte offset.
class ParseError : public Error {
public:
    using Error::Error;
};

// Invalid or inconsistent configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

// Filesystem-level failure (missing file, short read, ...).
class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace tinydistill
