#pragma once

#include <stdexcept>
#include <string>

namespace dissect {

// Base for every error raised by the library. The CLI maps ConfigError and
// UsageError to exit code 2 and everything else to 1.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class UsageError : public Error {
public:
    using Error::Error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

class PreconditionError : public Error {
public:
    using Error::Error;
};

class ZeroNormError : public Error {
public:
    using Error::Error;
};

class DegenerateTargetError : public Error {
public:
    using Error::Error;
};

class NonFiniteError : public Error {
public:
    using Error::Error;
};

class SingleClassError : public Error {
public:
    using Error::Error;
};

class CheckpointError : public Error {
public:
    using Error::Error;
};

class VersionMismatchError : public CheckpointError {
public:
    using CheckpointError::CheckpointError;
};

class TruncatedFileError : public CheckpointError {
public:
    using CheckpointError::CheckpointError;
};

class ChecksumError : public CheckpointError {
public:
    using CheckpointError::CheckpointError;
};

}  // namespace dissect
