#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace finecontrol {

enum class ErrorCode {
  kFormatMismatch,
  kDegeneratePose,
  kShapeMismatch,
  kNonpositiveTemperature,
  kNonDivisibleShape,
  kInvalidRange,
  kNegativeRadicand,
  kTEdge,
  kUnknownToken,
  kDivergence,
  kHookArity,
  kEmptyScene,
  kEmptyIdentity,
  kCountMismatch,
  kAmbiguousPosition,
  kLengthMismatch,
  kMissingTruePrompt,
  kNoVisibleKeypoints,
  kEmptyGt,
  kPoolExhausted,
  kInvalidAxisValue,
  kSchemaInvalid,
  kIo,
};

std::string_view error_code_name(ErrorCode code);

/// Exception carrying one of the module error codes. `what()` is prefixed
/// with the code name, e.g. "DEGENERATE_POSE: 1 visible keypoint".
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message);

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace finecontrol
