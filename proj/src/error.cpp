#include "fedsc/error.hpp"

namespace fedsc {

std::string_view error_name(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "invalid-argument";
    case ErrorCode::kMalformedHeader: return "malformed-header";
    case ErrorCode::kDimensionMismatch: return "dimension-mismatch";
    case ErrorCode::kTruncatedFile: return "truncated-file";
    case ErrorCode::kShapeMismatch: return "shape-mismatch";
    case ErrorCode::kNonfiniteGradient: return "nonfinite-gradient";
    case ErrorCode::kClassUnsupported: return "class-unsupported";
    case ErrorCode::kDegeneratePrototype: return "degenerate-prototype";
    case ErrorCode::kDegenerateVector: return "degenerate-vector";
    case ErrorCode::kEmptyClient: return "empty-client";
    case ErrorCode::kEmptyFeatureSet: return "empty-feature-set";
    case ErrorCode::kEmptyDataset: return "empty-dataset";
    case ErrorCode::kNoPositivePrototype: return "no-positive-prototype";
    case ErrorCode::kNoNegativePrototype: return "no-negative-prototype";
    case ErrorCode::kLabelOutOfRange: return "label-out-of-range";
    case ErrorCode::kInvalidConstants: return "invalid-constants";
    case ErrorCode::kNoFeasibleRate: return "no-feasible-rate";
    case ErrorCode::kInfeasibleConfiguration: return "infeasible-configuration";
    case ErrorCode::kInsufficientTrace: return "insufficient-trace";
    case ErrorCode::kMalformedCsv: return "malformed-csv";
    case ErrorCode::kIoError: return "io-error";
    case ErrorCode::kInvalidConfig: return "invalid-config";
  }
  return "unknown";
}

}  // namespace fedsc
