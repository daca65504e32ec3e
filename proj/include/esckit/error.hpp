#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace esckit {

enum class ErrorCode {
    // taxonomy
    MissingFile,
    ParseError,
    DuplicateId,
    EmptyList,
    InvalidLabel,
    // backend
    Timeout,
    RateLimited,
    ProtocolError,
    AuthError,
    Unavailable,
    ScriptExhausted,
    // corpus
    SchemaError,
    InvariantViolation,
    EmptyCorpus,
    InsufficientTurns,
    UnparseableJudgment,
    MissingSeverity,
    // synthesis
    UnparseableVerdict,
    EmptySeedCorpus,
    UnresolvableStrategy,
    PathLengthOutOfBounds,
    MalformedTranscript,
    PathMismatch,
    UnparseableScore,
    // metrics
    EmptyReference,
    LengthMismatch,
    EmptyInput,
    // engine
    UnparseableSummary,
    EmptyResponse,
    UpstreamBackendError,
    // evalharness
    TooFewItems,
    FailureRateExceeded,
    // service
    BadConfig,
    NotFound,
    EmptyMessage,
    // general
    InvalidArgument,
    IoError,
};

std::string_view to_string(ErrorCode code);

/// Every failure raised by the library. `detail` carries the offending
/// entity (an id, a section name, a raw model reply) without the prefix
/// that `what()` adds.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, std::string detail, long line = -1);

    ErrorCode code() const noexcept { return code_; }
    const std::string& detail() const noexcept { return detail_; }
    /// 1-based source line for ParseError / SchemaError, -1 otherwise.
    long line() const noexcept { return line_; }

private:
    ErrorCode code_;
    std::string detail_;
    long line_;
};

}  // namespace esckit
