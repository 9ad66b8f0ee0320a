#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace llmembed {

enum class ErrorCode {
  io,
  format,
  corruption,
  validation,
  alignment,
  range,
  shape,
  missing_source,
  stale_cache,
  non_finite,
  argument,
  mismatch,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::io: return "io";
    case ErrorCode::format: return "format";
    case ErrorCode::corruption: return "corruption";
    case ErrorCode::validation: return "validation";
    case ErrorCode::alignment: return "alignment";
    case ErrorCode::range: return "range";
    case ErrorCode::shape: return "shape";
    case ErrorCode::missing_source: return "missing_source";
    case ErrorCode::stale_cache: return "stale_cache";
    case ErrorCode::non_finite: return "non_finite";
    case ErrorCode::argument: return "argument";
    case ErrorCode::mismatch: return "mismatch";
  }
  return "unknown";
}

/// Every failure raised by the library carries a stable code so the CLI can
/// print a machine-parsable tag next to the human-readable message.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace llmembed
