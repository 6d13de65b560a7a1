#include "asl/error.hpp"

namespace asl {

std::string_view error_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kVariantWeightConflict: return "VariantWeightConflict";
    case ErrorCode::kNonPositiveLearningRate: return "NonPositiveLearningRate";
    case ErrorCode::kConfigInvalid: return "ConfigInvalid";
    case ErrorCode::kBackendNotLoaded: return "BackendNotLoaded";
    case ErrorCode::kResolutionMismatch: return "ResolutionMismatch";
    case ErrorCode::kEmptyForegroundSet: return "EmptyForegroundSet";
    case ErrorCode::kCacheCorrupt: return "CacheCorrupt";
    case ErrorCode::kUnsupportedArch: return "UnsupportedArch";
    case ErrorCode::kChannelMismatch: return "ChannelMismatch";
    case ErrorCode::kKindMismatch: return "KindMismatch";
    case ErrorCode::kNonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::kUnpairedDataInPairedMode: return "UnpairedDataInPairedMode";
    case ErrorCode::kMissingFragment: return "MissingFragment";
    case ErrorCode::kUnknownCategory: return "UnknownCategory";
    case ErrorCode::kEmptyResult: return "EmptyResult";
    case ErrorCode::kMissingWeights: return "MissingWeights";
    case ErrorCode::kLayoutModeMismatch: return "LayoutModeMismatch";
    case ErrorCode::kMissingGeneratorRole: return "MissingGeneratorRole";
    case ErrorCode::kDiskFull: return "DiskFull";
    case ErrorCode::kExtractorMismatch: return "ExtractorMismatch";
    case ErrorCode::kNumericalFailure: return "NumericalFailure";
    case ErrorCode::kShapeMismatch: return "ShapeMismatch";
    case ErrorCode::kIoError: return "IoError";
    case ErrorCode::kCheckpointCorrupt: return "CheckpointCorrupt";
  }
  return "Unknown";
}

}  // namespace asl
