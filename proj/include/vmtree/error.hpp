#pragma once

#include <stdexcept>
#include <string>

namespace vmtree {

enum class ErrorCode {
    OutOfRange,
    IllegalWrite,
    Unsupported,
    CapacityExceeded,
    PoolExhausted,
    StorageFull,
    EmptyTree,
    Incompatible,
    BadFormat,
    CrashInjected,
};

inline const char* to_string(ErrorCode code) {
    switch (code) {
    case ErrorCode::OutOfRange: return "OutOfRange";
    case ErrorCode::IllegalWrite: return "IllegalWrite";
    case ErrorCode::Unsupported: return "Unsupported";
    case ErrorCode::CapacityExceeded: return "CapacityExceeded";
    case ErrorCode::PoolExhausted: return "PoolExhausted";
    case ErrorCode::StorageFull: return "StorageFull";
    case ErrorCode::EmptyTree: return "EmptyTree";
    case ErrorCode::Incompatible: return "Incompatible";
    case ErrorCode::BadFormat: return "BadFormat";
    case ErrorCode::CrashInjected: return "CrashInjected";
    }
    return "Unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

}  // namespace vmtree
