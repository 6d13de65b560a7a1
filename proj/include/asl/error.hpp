#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace asl {

enum class ErrorCode {
  kVariantWeightConflict,
  kNonPositiveLearningRate,
  kConfigInvalid,
  kBackendNotLoaded,
  kResolutionMismatch,
  kEmptyForegroundSet,
  kCacheCorrupt,
  kUnsupportedArch,
  kChannelMismatch,
  kKindMismatch,
  kNonFiniteLoss,
  kUnpairedDataInPairedMode,
  kMissingFragment,
  kUnknownCategory,
  kEmptyResult,
  kMissingWeights,
  kLayoutModeMismatch,
  kMissingGeneratorRole,
  kDiskFull,
  kExtractorMismatch,
  kNumericalFailure,
  kShapeMismatch,
  kIoError,
  kCheckpointCorrupt,
};

std::string_view error_name(ErrorCode code);

// All module failures surface as asl::Error; the code is what the CLI reports.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(error_name(code)) + ": " + what),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace asl
