#pragma once

#include <stdexcept>
#include <string>

namespace personalize {

// Base class for all toolkit errors. Subclasses map onto the stable CLI
// exit codes: usage (2), data (3), numerical (4).
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// --- data / format errors (exit 3) ---
class ParseError : public Error {
public:
    using Error::Error;
};
class MissingFileError : public Error {
public:
    using Error::Error;
};
class PlaceholderError : public Error {
public:
    using Error::Error;
};
class ShapeError : public Error {
public:
    using Error::Error;
};
class SpecError : public Error {
public:
    using Error::Error;
};
class IndexError : public Error {
public:
    using Error::Error;
};
class DataError : public Error {
public:
    using Error::Error;
};
class FormatError : public Error {
public:
    using Error::Error;
};
class VersionError : public Error {
public:
    using Error::Error;
};
class ConditioningError : public Error {
public:
    using Error::Error;
};
class InitError : public Error {
public:
    using Error::Error;
};
class UnknownTokenError : public Error {
public:
    using Error::Error;
};
class EmptyPositiveError : public Error {
public:
    using Error::Error;
};
class DimensionError : public Error {
public:
    using Error::Error;
};
class MissingOutputError : public Error {
public:
    using Error::Error;
};

// --- numerical errors (exit 4) ---
class NonFiniteError : public Error {
public:
    using Error::Error;
};
class NumericalError : public Error {
public:
    using Error::Error;
};

// --- CLI usage errors (exit 2) ---
class UsageError : public Error {
public:
    using Error::Error;
};

}  // namespace personalize
