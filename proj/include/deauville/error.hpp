#pragma once

#include <stdexcept>
#include <string>

namespace deauville {

/// Base class for every error raised by the library. The C API maps the
/// concrete subclasses onto stable status codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Bad input: malformed spec, out-of-range value, violated precondition.
class ValidationError : public Error {
public:
    using Error::Error;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
public:
    using Error::Error;
};

/// Weighted kappa is undefined because expected disagreement is zero.
class UndefinedKappaError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

/// Persisted state (manifest, checksums) cannot be trusted or resumed.
class UnrecoverableStateError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

inline void require(bool condition, const std::string& message)
{
    if (!condition) {
        throw ValidationError(message);
    }
}

} // namespace deauville
