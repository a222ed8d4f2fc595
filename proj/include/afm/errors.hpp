#pragma once

#include <stdexcept>
#include <string>

namespace afm {

// Base class for everything thrown by this library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad or inconsistent configuration (CLI exit code 2).
struct ConfigError : Error {
    using Error::Error;
};

// Simulation-side failures (CLI exit code 3).
struct SimError : Error {
    using Error::Error;
};

struct StepUnderflow : SimError {
    using SimError::SimError;
};

struct SimDiverged : SimError {
    using SimError::SimError;
};

struct RootNotConverged : SimError {
    using SimError::SimError;
};

struct EngagementFailed : SimError {
    using SimError::SimError;
};

struct OutOfOrderSample : Error {
    using Error::Error;
};

struct WindowTooLarge : Error {
    using Error::Error;
};

struct InsufficientHistory : Error {
    using Error::Error;
};

struct EffectiveQNonPositive : Error {
    using Error::Error;
};

struct ParseError : Error {
    using Error::Error;
};

struct NonRectangular : ParseError {
    using ParseError::ParseError;
};

struct NonFiniteHeight : ParseError {
    using ParseError::ParseError;
};

struct OutOfBounds : Error {
    using Error::Error;
};

struct EmptyTrace : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

}  // namespace afm
