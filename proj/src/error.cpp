#include "esckit/error.hpp"

namespace esckit {

std::string_view to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::MissingFile: return "MissingFile";
        case ErrorCode::ParseError: return "ParseError";
        case ErrorCode::DuplicateId: return "DuplicateId";
        case ErrorCode::EmptyList: return "EmptyList";
        case ErrorCode::InvalidLabel: return "InvalidLabel";
        case ErrorCode::Timeout: return "Timeout";
        case ErrorCode::RateLimited: return "RateLimited";
        case ErrorCode::ProtocolError: return "ProtocolError";
        case ErrorCode::AuthError: return "AuthError";
        case ErrorCode::Unavailable: return "Unavailable";
        case ErrorCode::ScriptExhausted: return "ScriptExhausted";
        case ErrorCode::SchemaError: return "SchemaError";
        case ErrorCode::InvariantViolation: return "InvariantViolation";
        case ErrorCode::EmptyCorpus: return "EmptyCorpus";
        case ErrorCode::InsufficientTurns: return "InsufficientTurns";
        case ErrorCode::UnparseableJudgment: return "UnparseableJudgment";
        case ErrorCode::MissingSeverity: return "MissingSeverity";
        case ErrorCode::UnparseableVerdict: return "UnparseableVerdict";
        case ErrorCode::EmptySeedCorpus: return "EmptySeedCorpus";
        case ErrorCode::UnresolvableStrategy: return "UnresolvableStrategy";
        case ErrorCode::PathLengthOutOfBounds: return "PathLengthOutOfBounds";
        case ErrorCode::MalformedTranscript: return "MalformedTranscript";
        case ErrorCode::PathMismatch: return "PathMismatch";
        case ErrorCode::UnparseableScore: return "UnparseableScore";
        case ErrorCode::EmptyReference: return "EmptyReference";
        case ErrorCode::LengthMismatch: return "LengthMismatch";
        case ErrorCode::EmptyInput: return "EmptyInput";
        case ErrorCode::UnparseableSummary: return "UnparseableSummary";
        case ErrorCode::EmptyResponse: return "EmptyResponse";
        case ErrorCode::UpstreamBackendError: return "UpstreamBackendError";
        case ErrorCode::TooFewItems: return "TooFewItems";
        case ErrorCode::FailureRateExceeded: return "FailureRateExceeded";
        case ErrorCode::BadConfig: return "BadConfig";
        case ErrorCode::NotFound: return "NotFound";
        case ErrorCode::EmptyMessage: return "EmptyMessage";
        case ErrorCode::InvalidArgument: return "InvalidArgument";
        case ErrorCode::IoError: return "IoError";
    }
    return "Unknown";
}

namespace {

std::string format_message(ErrorCode code, const std::string& detail, long line) {
    std::string msg(to_string(code));
    if (line >= 0) msg += " at line " + std::to_string(line);
    if (!detail.empty()) msg += ": " + detail;
    return msg;
}

}  // namespace

Error::Error(ErrorCode code, std::string detail, long line)
    : std::runtime_error(format_message(code, detail, line)),
      code_(code),
      detail_(std::move(detail)),
      line_(line) {}

}  // namespace esckit
