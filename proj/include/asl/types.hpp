#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace asl {

enum class Domain { kSketch, kColor, kLabelMap };

struct ValueRange {
  double lo = -1.0;
  double hi = 1.0;
};

// N x C x H x W images. Construction checks the domain/channel rule and the
// value range; a resolution check is separate since generators may see any size.
class ImageBatch {
 public:
  ImageBatch(torch::Tensor data, Domain domain, ValueRange range = {});

  const torch::Tensor& data() const { return data_; }
  Domain domain() const { return domain_; }
  ValueRange range() const { return range_; }
  std::int64_t size() const { return data_.size(0); }
  std::int64_t channels() const { return data_.size(1); }
  std::int64_t height() const { return data_.size(2); }
  std::int64_t width() const { return data_.size(3); }

  void require_resolution(int resolution) const;

 private:
  torch::Tensor data_;
  Domain domain_;
  ValueRange range_;
};

enum class MapKind { kMulticlass, kBinary };

// Per-pixel soft class scores, N x K x h x w, summing to 1 over K.
// Binary maps are channel 0 = background, channel 1 = foreground.
struct SegmentationMap {
  torch::Tensor scores;
  MapKind kind = MapKind::kMulticlass;

  std::int64_t class_count() const { return scores.size(1); }
  // Throws ShapeMismatch when any pixel departs from sum 1 by more than tol
  // or holds a negative score.
  void check_normalized(double tol = 1e-5) const;
  SegmentationMap detach() const { return {scores.detach(), kind}; }
};

std::string_view to_string(MapKind k);

}  // namespace asl

namespace asl {

// A source/target pair of batches. `aligned` marks stem-matched pairs; the
// paired baseline refuses batches without it.
struct TranslationBatch {
  ImageBatch source;
  ImageBatch target;
  bool aligned = false;
  std::vector<std::string> source_ids;
  std::vector<std::string> target_ids;
};

}  // namespace asl
