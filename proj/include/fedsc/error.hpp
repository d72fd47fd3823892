#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace fedsc {

enum class ErrorCode {
  kInvalidArgument,
  kMalformedHeader,
  kDimensionMismatch,
  kTruncatedFile,
  kShapeMismatch,
  kNonfiniteGradient,
  kClassUnsupported,
  kDegeneratePrototype,
  kDegenerateVector,
  kEmptyClient,
  kEmptyFeatureSet,
  kEmptyDataset,
  kNoPositivePrototype,
  kNoNegativePrototype,
  kLabelOutOfRange,
  kInvalidConstants,
  kNoFeasibleRate,
  kInfeasibleConfiguration,
  kInsufficientTrace,
  kMalformedCsv,
  kIoError,
  kInvalidConfig,
};

/// Stable kebab-case name, used in CLI error output.
std::string_view error_name(ErrorCode code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(error_name(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace fedsc
