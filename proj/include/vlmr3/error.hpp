#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace vlmr3 {

enum class ErrorCode {
  DegenerateBox,
  EmptyImage,
  DomainError,
  GroupTooSmall,
  SpanMismatch,
  MissingReference,
  EmptyMask,
  BackendFailure,
  Unsupported,
  AlignmentError,
  NonFiniteGradient,
  GeneratorFailure,
  ClientFailure,
  SchemaViolation,
  ConfigError,
  InvalidArgument,
  IoError,
};

std::string_view to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace vlmr3
