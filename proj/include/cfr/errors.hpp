#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cfr {

enum class ErrorCode {
  kInput,
  kSchema,
  kConfig,
  kInvalidTarget,
  kTransport,
  kProtocol,
  kPromptTooLong,
  kDegenerateEmbedding,
  kAlignment,
  kRender,
  kParseFailure,
  kJudgeParse,
  kNumerical,
  kOracleCap,
  kUndefinedAgreement,
  kUndefinedCorrelation,
  kIo,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInput: return "input";
    case ErrorCode::kSchema: return "schema";
    case ErrorCode::kConfig: return "config";
    case ErrorCode::kInvalidTarget: return "invalid-target";
    case ErrorCode::kTransport: return "transport";
    case ErrorCode::kProtocol: return "protocol";
    case ErrorCode::kPromptTooLong: return "prompt-too-long";
    case ErrorCode::kDegenerateEmbedding: return "degenerate-embedding";
    case ErrorCode::kAlignment: return "alignment";
    case ErrorCode::kRender: return "render";
    case ErrorCode::kParseFailure: return "parse-failure";
    case ErrorCode::kJudgeParse: return "judge-parse";
    case ErrorCode::kNumerical: return "numerical";
    case ErrorCode::kOracleCap: return "oracle-cap";
    case ErrorCode::kUndefinedAgreement: return "undefined-agreement";
    case ErrorCode::kUndefinedCorrelation: return "undefined-correlation";
    case ErrorCode::kIo: return "io";
  }
  return "unknown";
}

// Every failure surfaced by the library carries a machine-readable code so
// callers (and the CLI exit-code mapping) can branch without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + " error: " + message),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

class TransportError : public Error {
 public:
  TransportError(const std::string& message, int attempts)
      : Error(ErrorCode::kTransport,
              message + " (after " + std::to_string(attempts) + " attempts)"),
        attempts_(attempts) {}

  int attempts() const noexcept { return attempts_; }

 private:
  int attempts_;
};

}  // namespace cfr
