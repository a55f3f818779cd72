#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>

namespace salient_teach {

enum class ErrorCode {
  invalid_argument,
  not_found,
  conflict,
  wrong_state,
  precondition_failed,
  load_error,
  unsupported_model,
  compatibility,
  parse_error,
  cancelled,
};

/// Wire/CLI spelling of an error code.
constexpr std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::not_found: return "not_found";
    case ErrorCode::conflict: return "conflict";
    case ErrorCode::wrong_state: return "wrong_state";
    case ErrorCode::precondition_failed: return "precondition_failed";
    case ErrorCode::load_error: return "load_error";
    case ErrorCode::unsupported_model: return "unsupported_model";
    case ErrorCode::compatibility: return "compatibility";
    case ErrorCode::parse_error: return "parse_error";
    case ErrorCode::cancelled: return "cancelled";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

template <ErrorCode Code>
class CodedError : public Error {
 public:
  explicit CodedError(const std::string& what) : Error(Code, what) {}
};

using InvalidArgument = CodedError<ErrorCode::invalid_argument>;
using NotFound = CodedError<ErrorCode::not_found>;
using Conflict = CodedError<ErrorCode::conflict>;
using StateError = CodedError<ErrorCode::wrong_state>;
using PreconditionError = CodedError<ErrorCode::precondition_failed>;
using UnsupportedModel = CodedError<ErrorCode::unsupported_model>;
using CompatibilityError = CodedError<ErrorCode::compatibility>;
using Cancelled = CodedError<ErrorCode::cancelled>;

/// Raised when a model asset cannot be read; carries the offending path.
class LoadError : public Error {
 public:
  LoadError(std::string path, const std::string& reason)
      : Error(ErrorCode::load_error, path + ": " + reason), path_(std::move(path)) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

/// Raised for malformed session documents; offset is a byte position in the input.
class ParseError : public Error {
 public:
  ParseError(std::size_t offset, const std::string& reason)
      : Error(ErrorCode::parse_error, reason + " (at byte " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace salient_teach
