#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace bclat {

enum class ErrorCode {
  InvalidParameter,
  DegenerateChain,
  SingularSystem,
  ModelUnstable,
  DivisionDegenerate,
  ForkSaturated,
  DuplicateNode,
  InsufficientNodes,
  CapExceeded,
  Io,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidParameter: return "invalid-parameter";
    case ErrorCode::DegenerateChain: return "degenerate-chain";
    case ErrorCode::SingularSystem: return "singular-system";
    case ErrorCode::ModelUnstable: return "model-unstable";
    case ErrorCode::DivisionDegenerate: return "division-degenerate";
    case ErrorCode::ForkSaturated: return "fork-saturated";
    case ErrorCode::DuplicateNode: return "duplicate-node";
    case ErrorCode::InsufficientNodes: return "insufficient-nodes";
    case ErrorCode::CapExceeded: return "cap-exceeded";
    case ErrorCode::Io: return "io-error";
  }
  return "unknown";
}

/// Every failure raised by the library carries a machine-readable code; the
/// message starts with the code's kebab-case name.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& detail)
      : std::runtime_error(std::string(to_string(code)) + ": " + detail), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace bclat
