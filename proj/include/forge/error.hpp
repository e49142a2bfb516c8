#pragma once

#include <stdexcept>
#include <string>

namespace forge {

/// Base for every error the library raises on purpose.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Caller handed us something that violates an operation's precondition.
class PreconditionError : public Error {
public:
    using Error::Error;
};

/// Bad or incomplete configuration. Never retried.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Transport-level failure that survived the retry budget.
class DispatchError : public Error {
public:
    DispatchError(const std::string& what, int attempts)
        : Error(what), attempts_(attempts) {}
    int attempts() const noexcept { return attempts_; }

private:
    int attempts_;
};

/// The peer answered, but not in the documented wire format.
class ProtocolError : public Error {
public:
    using Error::Error;
};

/// Agent cannot do what was asked (e.g. no token logprobs).
class CapabilityError : public Error {
public:
    using Error::Error;
};

/// Scored tokens could not be isolated to the continuation.
class ScoringError : public Error {
public:
    using Error::Error;
};

/// A pipeline stage failed for one image. Carries the stage tag.
class StageError : public Error {
public:
    StageError(std::string stage, const std::string& what)
        : Error(stage + ": " + what), stage_(std::move(stage)) {}
    const std::string& stage() const noexcept { return stage_; }

private:
    std::string stage_;
};

/// Filesystem / persistence failure.
class StorageError : public Error {
public:
    using Error::Error;
};

}  // namespace forge
