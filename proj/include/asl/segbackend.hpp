#pragma once

#include <atomic>
#include <filesystem>
#include <memory>
#include <mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include <torch/torch.h>

#include "asl/config.hpp"
#include "asl/types.hpp"

namespace asl {

// A frozen segmentation network. Parameters never require grad, so no loss can
// route gradient into them; gradients still flow back to the input images.
class SegBackend {
 public:
  SegBackend(int class_count, std::vector<int> foreground_ids, bool soft_output = true);
  virtual ~SegBackend() = default;
  SegBackend(const SegBackend&) = delete;
  SegBackend& operator=(const SegBackend&) = delete;

  int class_count() const { return class_count_; }
  const std::vector<int>& foreground_ids() const { return foreground_ids_; }
  bool soft_output() const { return soft_output_; }

  virtual bool loaded() const { return true; }
  virtual std::vector<torch::Tensor> parameters() const = 0;
  virtual std::string name() const = 0;
  std::string parameter_checksum() const;

  // Soft scores over class_count() classes at the input resolution.
  SegmentationMap segment_multiclass(const ImageBatch& batch);

  // Images passed through the network so far (instrumentation).
  std::int64_t forward_count() const { return forward_count_.load(); }

  // Sum of |grad| over parameters; undefined grads count as zero.
  double gradient_abs_sum() const;

 protected:
  virtual torch::Tensor logits(const torch::Tensor& images) = 0;
  virtual bool supports_size(std::int64_t h, std::int64_t w) const;

 private:
  int class_count_;
  std::vector<int> foreground_ids_;
  bool soft_output_;
  std::atomic<std::int64_t> forward_count_{0};
};

// Logits are an affine map of the pixel colour: the negative squared distance
// to a per-class prototype colour divided by a temperature, with the
// class-independent |p|^2 term dropped. Argmax is therefore nearest-prototype.
class StubSegBackend final : public SegBackend {
 public:
  // prototypes: K x 3 colours in [-1, 1].
  StubSegBackend(torch::Tensor prototypes, std::vector<int> foreground_ids,
                 double temperature);
  // Constant (zero) logits: uniform 1/K at every pixel.
  static std::unique_ptr<StubSegBackend> constant(int class_count,
                                                  std::vector<int> foreground_ids);

  std::vector<torch::Tensor> parameters() const override { return {weight_, bias_}; }
  std::string name() const override { return "stub"; }
  const torch::Tensor& prototypes() const { return prototypes_; }

 protected:
  torch::Tensor logits(const torch::Tensor& images) override;

 private:
  StubSegBackend(int class_count, std::vector<int> foreground_ids);

  torch::Tensor prototypes_;
  torch::Tensor weight_;  // K x 3 x 1 x 1
  torch::Tensor bias_;    // K
};

// TorchScript panoptic/semantic model: N x 3 x H x W in [-1, 1] -> N x K x h x w
// logits, resized to the input size when h, w differ.
class TorchScriptSegBackend final : public SegBackend {
 public:
  TorchScriptSegBackend(const std::string& path, int class_count,
                        std::vector<int> foreground_ids, int input_multiple = 32);

  bool loaded() const override { return loaded_; }
  std::vector<torch::Tensor> parameters() const override;
  std::string name() const override { return "torchscript:" + path_; }

 protected:
  torch::Tensor logits(const torch::Tensor& images) override;
  bool supports_size(std::int64_t h, std::int64_t w) const override;

 private:
  struct Impl;
  std::shared_ptr<Impl> impl_;
  std::string path_;
  int input_multiple_;
  bool loaded_ = false;
};

// Colours of the synthetic shape-scene classes, in [-1, 1]:
// 0 sky, 1 grass, 2 water (stuff); 3 box, 4 ball (things).
torch::Tensor synthetic_palette();
std::vector<int> synthetic_foreground_ids();

std::unique_ptr<SegBackend> make_seg_backend(const NetworkConfig& cfg);

// Channel 0 = sum over background classes, channel 1 = sum over foreground.
SegmentationMap collapse_to_binary(const SegmentationMap& map,
                                   const std::vector<int>& foreground_ids);

// Persistent maps of real images, keyed by content hash.
// On disk: segcache/<key>.segmap = "ASLSEG1", K, h, w as little-endian u32,
// then K*h*w little-endian float32 scores. Binary maps are rebuilt on load.
class SegCache {
 public:
  SegCache(std::filesystem::path dir, SegBackend& backend);

  struct Result {
    SegmentationMap multiclass;
    SegmentationMap binary;
    std::vector<bool> hits;  // per image
  };

  Result segment_cached(const ImageBatch& batch);
  std::string image_key(const torch::Tensor& image) const;  // image: C x H x W
  std::filesystem::path entry_path(const std::string& key) const;

  std::int64_t hits() const { return hits_; }
  std::int64_t misses() const { return misses_; }
  std::int64_t corrupt_recoveries() const { return corrupt_; }

  static void write_entry(const std::filesystem::path& path, const torch::Tensor& scores);
  // Returns an undefined tensor when the file is missing; throws CacheCorrupt
  // on a malformed record.
  static torch::Tensor read_entry(const std::filesystem::path& path);

 private:
  std::filesystem::path dir_;
  SegBackend& backend_;
  std::string backend_checksum_;
  std::mutex mutex_;
  std::unordered_map<std::string, torch::Tensor> memory_;
  std::int64_t hits_ = 0;
  std::int64_t misses_ = 0;
  std::int64_t corrupt_ = 0;
};

}  // namespace asl
