#pragma once

#include <stdexcept>
#include <string>

namespace kcap {

// One error type for the whole library. The code is what CLI layers and tests
// dispatch on; the message is for humans.
enum class ErrorCode {
    ShapeMismatch,
    NotSymmetric,
    NotFinite,
    RepairExceeded,
    EigenOvershoot,
    TooLarge,
    NegativeVariance,
    NotPsd2x2,
    MissingNtk,
    NotProbabilityVector,
    NotPermutation,
    TooShort,
    DegenerateGrammar,
    UnsatisfiableLength,
    RadiusOverflow,
    CapacityExceeded,
    StageViolation,
    TooFewPoints,
    TooFewReps,
    SingularSystem,
    BadConfig,
    IoError,
};

constexpr const char* error_code_name(ErrorCode c) {
    switch (c) {
        case ErrorCode::ShapeMismatch: return "ShapeMismatch";
        case ErrorCode::NotSymmetric: return "NotSymmetric";
        case ErrorCode::NotFinite: return "NotFinite";
        case ErrorCode::RepairExceeded: return "RepairExceeded";
        case ErrorCode::EigenOvershoot: return "EigenOvershoot";
        case ErrorCode::TooLarge: return "TooLarge";
        case ErrorCode::NegativeVariance: return "NegativeVariance";
        case ErrorCode::NotPsd2x2: return "NotPsd2x2";
        case ErrorCode::MissingNtk: return "MissingNtk";
        case ErrorCode::NotProbabilityVector: return "NotProbabilityVector";
        case ErrorCode::NotPermutation: return "NotPermutation";
        case ErrorCode::TooShort: return "TooShort";
        case ErrorCode::DegenerateGrammar: return "DegenerateGrammar";
        case ErrorCode::UnsatisfiableLength: return "UnsatisfiableLength";
        case ErrorCode::RadiusOverflow: return "RadiusOverflow";
        case ErrorCode::CapacityExceeded: return "CapacityExceeded";
        case ErrorCode::StageViolation: return "StageViolation";
        case ErrorCode::TooFewPoints: return "TooFewPoints";
        case ErrorCode::TooFewReps: return "TooFewReps";
        case ErrorCode::SingularSystem: return "SingularSystem";
        case ErrorCode::BadConfig: return "BadConfig";
        case ErrorCode::IoError: return "IoError";
    }
    return "Unknown";
}

class Error : public std::runtime_error {
  public:
    Error(ErrorCode code, const std::string& msg)
        : std::runtime_error(std::string(error_code_name(code)) + ": " + msg), code_(code) {}

    ErrorCode code() const { return code_; }

  private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& msg) { throw Error(code, msg); }

inline void require(bool cond, ErrorCode code, const std::string& msg) {
    if (!cond) fail(code, msg);
}

}  // namespace kcap
