#include "finecontrol/error.hpp"

namespace finecontrol {

std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kFormatMismatch: return "FORMAT_MISMATCH";
    case ErrorCode::kDegeneratePose: return "DEGENERATE_POSE";
    case ErrorCode::kShapeMismatch: return "SHAPE_MISMATCH";
    case ErrorCode::kNonpositiveTemperature: return "NONPOSITIVE_TEMPERATURE";
    case ErrorCode::kNonDivisibleShape: return "NON_DIVISIBLE_SHAPE";
    case ErrorCode::kInvalidRange: return "INVALID_RANGE";
    case ErrorCode::kNegativeRadicand: return "NEGATIVE_RADICAND";
    case ErrorCode::kTEdge: return "T_EDGE";
    case ErrorCode::kUnknownToken: return "UNKNOWN_TOKEN";
    case ErrorCode::kDivergence: return "DIVERGENCE";
    case ErrorCode::kHookArity: return "HOOK_ARITY";
    case ErrorCode::kEmptyScene: return "EMPTY_SCENE";
    case ErrorCode::kEmptyIdentity: return "EMPTY_IDENTITY";
    case ErrorCode::kCountMismatch: return "COUNT_MISMATCH";
    case ErrorCode::kAmbiguousPosition: return "AMBIGUOUS_POSITION";
    case ErrorCode::kLengthMismatch: return "LENGTH_MISMATCH";
    case ErrorCode::kMissingTruePrompt: return "MISSING_TRUE_PROMPT";
    case ErrorCode::kNoVisibleKeypoints: return "NO_VISIBLE_KEYPOINTS";
    case ErrorCode::kEmptyGt: return "EMPTY_GT";
    case ErrorCode::kPoolExhausted: return "POOL_EXHAUSTED";
    case ErrorCode::kInvalidAxisValue: return "INVALID_AXIS_VALUE";
    case ErrorCode::kSchemaInvalid: return "SCHEMA_INVALID";
    case ErrorCode::kIo: return "IO";
  }
  return "UNKNOWN";
}

Error::Error(ErrorCode code, const std::string& message)
    : std::runtime_error(std::string(error_code_name(code)) + ": " + message), code_(code) {}

}  // namespace finecontrol
