#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace avemo {

enum class ErrorCode {
  kMalformedManifest,
  kInvariantViolation,
  kMissingMedia,
  kEmptyAudio,
  kSampleRateMismatch,
  kEmptyVideo,
  kDecodeError,
  kEmptyInput,
  kShapeMismatch,
  kDoubleMerge,
  kContextOverflow,
  kUnknownEmotion,
  kParseError,
  kMissingField,
  kEmptyTarget,
  kFrozenGroupViolation,
  kNonFiniteLoss,
  kPrecondition,
  kEmptyCorpus,
  kScorerFailure,
  kServerNotReady,
  kServerBusy,
  kUnknownSession,
  kGenerationTimeout,
  kTurnTooLarge,
  kConfigError,
  kIoError,
};

inline std::string_view to_string(ErrorCode c) {
  switch (c) {
    case ErrorCode::kMalformedManifest: return "MalformedManifest";
    case ErrorCode::kInvariantViolation: return "InvariantViolation";
    case ErrorCode::kMissingMedia: return "MissingMedia";
    case ErrorCode::kEmptyAudio: return "EmptyAudio";
    case ErrorCode::kSampleRateMismatch: return "SampleRateMismatch";
    case ErrorCode::kEmptyVideo: return "EmptyVideo";
    case ErrorCode::kDecodeError: return "DecodeError";
    case ErrorCode::kEmptyInput: return "EmptyInput";
    case ErrorCode::kShapeMismatch: return "ShapeMismatch";
    case ErrorCode::kDoubleMerge: return "DoubleMerge";
    case ErrorCode::kContextOverflow: return "ContextOverflow";
    case ErrorCode::kUnknownEmotion: return "UnknownEmotion";
    case ErrorCode::kParseError: return "ParseError";
    case ErrorCode::kMissingField: return "MissingField";
    case ErrorCode::kEmptyTarget: return "EmptyTarget";
    case ErrorCode::kFrozenGroupViolation: return "FrozenGroupViolation";
    case ErrorCode::kNonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::kPrecondition: return "PreconditionFailed";
    case ErrorCode::kEmptyCorpus: return "EmptyCorpus";
    case ErrorCode::kScorerFailure: return "ScorerFailure";
    case ErrorCode::kServerNotReady: return "ServerNotReady";
    case ErrorCode::kServerBusy: return "ServerBusy";
    case ErrorCode::kUnknownSession: return "UnknownSession";
    case ErrorCode::kGenerationTimeout: return "GenerationTimeout";
    case ErrorCode::kTurnTooLarge: return "TurnTooLarge";
    case ErrorCode::kConfigError: return "ConfigError";
    case ErrorCode::kIoError: return "IoError";
  }
  return "Unknown";
}

/// Single exception type for the library; callers switch on code().
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message),
        code_(code),
        message_(message) {}

  ErrorCode code() const noexcept { return code_; }
  const std::string& message() const noexcept { return message_; }

 private:
  ErrorCode code_;
  std::string message_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace avemo
