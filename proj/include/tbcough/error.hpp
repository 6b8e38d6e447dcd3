#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace tbcough {

enum class ErrorCode {
    MissingFile,
    MalformedHeader,
    UnsupportedCodec,
    InvalidArgument,
    ShapeMismatch,
    LengthMismatch,
    MissingColumn,
    ParseError,
    DuplicateId,
    UnresolvedParticipant,
    SingleClass,
    NonFinite,
    SampleRateMismatch,
    OutOfVocabulary,
    DegenerateColumn,
    TooFewGroups,
    Divergence,
    HashMismatch,
    Io,
};

inline std::string_view to_string(ErrorCode code) {
    switch (code) {
    case ErrorCode::MissingFile: return "missing-file";
    case ErrorCode::MalformedHeader: return "malformed-header";
    case ErrorCode::UnsupportedCodec: return "unsupported-codec";
    case ErrorCode::InvalidArgument: return "invalid-argument";
    case ErrorCode::ShapeMismatch: return "shape-mismatch";
    case ErrorCode::LengthMismatch: return "length-mismatch";
    case ErrorCode::MissingColumn: return "missing-column";
    case ErrorCode::ParseError: return "parse-error";
    case ErrorCode::DuplicateId: return "duplicate-id";
    case ErrorCode::UnresolvedParticipant: return "unresolved-participant";
    case ErrorCode::SingleClass: return "single-class";
    case ErrorCode::NonFinite: return "non-finite";
    case ErrorCode::SampleRateMismatch: return "sample-rate-mismatch";
    case ErrorCode::OutOfVocabulary: return "out-of-vocabulary";
    case ErrorCode::DegenerateColumn: return "degenerate-column";
    case ErrorCode::TooFewGroups: return "too-few-groups";
    case ErrorCode::Divergence: return "divergence";
    case ErrorCode::HashMismatch: return "hash-mismatch";
    case ErrorCode::Io: return "io";
    }
    return "unknown";
}

/// Every failure raised by the library carries one of the codes above so
/// callers (and tests) can branch on the kind of failure, not the message.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
    throw Error(code, what);
}

inline void require(bool condition, ErrorCode code, const std::string& what) {
    if (!condition) fail(code, what);
}

}  // namespace tbcough
