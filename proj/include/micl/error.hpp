#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace micl {

enum class ErrorCode {
  kMissingFile,
  kParse,
  kDimensionMismatch,
  kDanglingKey,
  kDuplicateId,
  kNonFinite,
  kZeroNorm,
  kCorruptHeader,
  kTruncated,
  kUnresolvableModality,
  kEmptyMemory,
  kInvalidArgument,
  kMissingField,
  kTransport,
  kMalformedResponse,
  kVersionMismatch,
  kConfig,
  kStageInputMissing,
  kStaleArtifact,
  kLocked,
};

std::string_view to_string(ErrorCode code);

/// Every failure raised by the library carries a machine-checkable code.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace micl
