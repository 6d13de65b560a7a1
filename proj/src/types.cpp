#include "asl/types.hpp"

#include "asl/error.hpp"

namespace asl {

ImageBatch::ImageBatch(torch::Tensor data, Domain domain, ValueRange range)
    : data_(std::move(data)), domain_(domain), range_(range) {
  if (data_.dim() != 4) {
    throw Error(ErrorCode::kShapeMismatch, "image batch must be N x C x H x W");
  }
  const auto c = data_.size(1);
  const bool channels_ok = domain_ == Domain::kColor ? c == 3 : (c == 1 || c == 3);
  if (!channels_ok) {
    throw Error(ErrorCode::kChannelMismatch,
                "unexpected channel count " + std::to_string(c) + " for domain");
  }
  if (data_.numel() > 0) {
    auto lo = data_.min().item<double>();
    auto hi = data_.max().item<double>();
    if (lo < range_.lo - 1e-6 || hi > range_.hi + 1e-6) {
      throw Error(ErrorCode::kShapeMismatch, "image values outside the value range");
    }
  }
}

void ImageBatch::require_resolution(int resolution) const {
  if (height() != resolution || width() != resolution) {
    throw Error(ErrorCode::kResolutionMismatch,
                "expected " + std::to_string(resolution) + "x" + std::to_string(resolution) +
                    ", got " + std::to_string(height()) + "x" + std::to_string(width()));
  }
}

void SegmentationMap::check_normalized(double tol) const {
  if (scores.dim() != 4) throw Error(ErrorCode::kShapeMismatch, "segmentation map must be 4-D");
  if (kind == MapKind::kBinary && scores.size(1) != 2) {
    throw Error(ErrorCode::kShapeMismatch, "binary map must have 2 channels");
  }
  auto s = scores.detach();
  if (s.min().item<double>() < -tol) {
    throw Error(ErrorCode::kShapeMismatch, "negative segmentation score");
  }
  auto err = (s.sum(1) - 1.0).abs().max().item<double>();
  if (err > tol) {
    throw Error(ErrorCode::kShapeMismatch, "segmentation scores do not sum to 1");
  }
}

std::string_view to_string(MapKind k) {
  return k == MapKind::kBinary ? "binary" : "multiclass";
}

}  // namespace asl
