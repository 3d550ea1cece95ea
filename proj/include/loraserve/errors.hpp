#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace loraserve {

/// Base of every error raised by the library. The CLI maps subclasses onto
/// exit codes, so new failure modes should derive from one of the two
/// categories below rather than from Error directly.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Bad input supplied by the caller (exit code 1).
class ValidationError : public Error {
public:
    using Error::Error;
};

/// Failure while executing otherwise valid work (exit code 2).
class RuntimeFailure : public Error {
public:
    using Error::Error;
};

class DimensionError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class RankMismatchError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class ConflictError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class NotFoundError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class EmptyInputError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class ParseError : public ValidationError {
public:
    ParseError(const std::string& what, std::size_t offset)
        : ValidationError(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}

    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

class EmptyPoolError : public RuntimeFailure {
public:
    using RuntimeFailure::RuntimeFailure;
};

class EmptyPlanError : public RuntimeFailure {
public:
    using RuntimeFailure::RuntimeFailure;
};

class StalenessError : public RuntimeFailure {
public:
    using RuntimeFailure::RuntimeFailure;
};

class IoError : public RuntimeFailure {
public:
    using RuntimeFailure::RuntimeFailure;
};

}  // namespace loraserve
