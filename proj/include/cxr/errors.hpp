#pragma once

#include <stdexcept>
#include <string>

namespace cxr {

/// Base class for all toolkit errors.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes or dimensions.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Invalid argument values (non-binary labels, bad config, malformed input).
class ValueError : public Error {
public:
    using Error::Error;
};

/// Operation attempted in a state that does not permit it.
class StateError : public Error {
public:
    using Error::Error;
};

/// API misuse (wrong call sequence, non-scalar backward root, ...).
class UsageError : public Error {
public:
    using Error::Error;
};

/// File system or decoding failures.
class IoError : public Error {
public:
    using Error::Error;
};

/// Checkpoint blob does not match its manifest hash.
class IntegrityError : public Error {
public:
    using Error::Error;
};

/// Non-finite values where finite ones are required.
class NumericError : public Error {
public:
    using Error::Error;
};

} // namespace cxr
