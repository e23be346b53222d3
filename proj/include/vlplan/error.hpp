#pragma once

#include <stdexcept>
#include <string>

namespace vlplan {

// Every recoverable failure in the library is one of these kinds. The CLI
// maps any thrown Error to a nonzero exit code.
enum class ErrorKind {
    IllegalAction,
    Unsolvable,
    InvalidToken,
    DimensionMismatch,
    MissingField,
    LengthExceeded,
    EmptyBatch,
    DegenerateGroup,
    ShapeMismatch,
    NonDeterministicLoss,
    NonFiniteLoss,
    RewardFailure,
    CorruptCheckpoint,
    BadKernel,
    NonFinite,
    CounterMismatch,
    BadConfig,
    Io,
};

inline const char* error_kind_name(ErrorKind k) {
    switch (k) {
        case ErrorKind::IllegalAction: return "IllegalAction";
        case ErrorKind::Unsolvable: return "Unsolvable";
        case ErrorKind::InvalidToken: return "InvalidToken";
        case ErrorKind::DimensionMismatch: return "DimensionMismatch";
        case ErrorKind::MissingField: return "MissingField";
        case ErrorKind::LengthExceeded: return "LengthExceeded";
        case ErrorKind::EmptyBatch: return "EmptyBatch";
        case ErrorKind::DegenerateGroup: return "DegenerateGroup";
        case ErrorKind::ShapeMismatch: return "ShapeMismatch";
        case ErrorKind::NonDeterministicLoss: return "NonDeterministicLoss";
        case ErrorKind::NonFiniteLoss: return "NonFiniteLoss";
        case ErrorKind::RewardFailure: return "RewardFailure";
        case ErrorKind::CorruptCheckpoint: return "CorruptCheckpoint";
        case ErrorKind::BadKernel: return "BadKernel";
        case ErrorKind::NonFinite: return "NonFinite";
        case ErrorKind::CounterMismatch: return "CounterMismatch";
        case ErrorKind::BadConfig: return "BadConfig";
        case ErrorKind::Io: return "Io";
    }
    return "Unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& msg)
        : std::runtime_error(std::string(error_kind_name(kind)) + ": " + msg), kind_(kind) {}

    ErrorKind kind() const { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) {
    throw Error(kind, msg);
}

inline void require(bool cond, ErrorKind kind, const std::string& msg) {
    if (!cond) fail(kind, msg);
}

}  // namespace vlplan
