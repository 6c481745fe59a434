#include "vlmr3/error.hpp"

namespace vlmr3 {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::DegenerateBox: return "DegenerateBox";
    case ErrorCode::EmptyImage: return "EmptyImage";
    case ErrorCode::DomainError: return "DomainError";
    case ErrorCode::GroupTooSmall: return "GroupTooSmall";
    case ErrorCode::SpanMismatch: return "SpanMismatch";
    case ErrorCode::MissingReference: return "MissingReference";
    case ErrorCode::EmptyMask: return "EmptyMask";
    case ErrorCode::BackendFailure: return "BackendFailure";
    case ErrorCode::Unsupported: return "Unsupported";
    case ErrorCode::AlignmentError: return "AlignmentError";
    case ErrorCode::NonFiniteGradient: return "NonFiniteGradient";
    case ErrorCode::GeneratorFailure: return "GeneratorFailure";
    case ErrorCode::ClientFailure: return "ClientFailure";
    case ErrorCode::SchemaViolation: return "SchemaViolation";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

}  // namespace vlmr3
