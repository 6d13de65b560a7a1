#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <torch/torch.h>

#include "asl/config.hpp"
#include "asl/types.hpp"

namespace asl {

enum class Layout { kPairedAB, kUnpairedAB };
enum class SampleMode { kPaired, kUnpaired };

std::string_view to_string(Layout l);

// Directory convention: trainA/trainB/testA/testB; A = sketches or label
// renderings, B = colour photos. Optional <stem>.mask class-index images sit
// next to the B images.
struct DatasetManifest {
  std::string name;
  Task task = Task::kSketch2Photo;
  Layout layout = Layout::kPairedAB;
  int resolution = 256;
  std::string source_dir;
  std::map<std::string, std::vector<std::string>> files;  // folder -> sorted file names

  std::size_t count(const std::string& folder) const;
  std::filesystem::path root() const { return source_dir; }

  // Split sizes must match the on-disk counts; PAIRED_AB needs identical stems.
  void verify() const;

  void save(const std::filesystem::path& path) const;
  static DatasetManifest load(const std::filesystem::path& path);
  // Builds a manifest from whatever image files the four folders hold.
  static DatasetManifest scan(const std::filesystem::path& dir, std::string name, Task task,
                              Layout layout, int resolution);
};

inline constexpr const char* kManifestFile = "manifest.json";

struct EdgeExtractorSpec {
  EdgeMethod method = EdgeMethod::kGradientFallback;
  double sigma = 1.0;  // Gaussian smoothing before differencing (0 = none)
  bool binarize = false;
  double threshold = 0.2;
  int resolution = 0;  // resize before extraction; 0 keeps the input size
  std::string hed_prototxt;
  std::string hed_weights;

  static EdgeExtractorSpec from_config(const Config& cfg);
};

// Single-channel float maps in [0, 1], one per input (8-bit RGB or grey).
std::vector<cv::Mat> extract_edges(const std::vector<cv::Mat>& images,
                                   const EdgeExtractorSpec& spec);

// Fixed train/test counts for the datasets of the original experiments.
struct SplitPreset {
  std::string_view name;
  int train;
  int test;
};
std::optional<SplitPreset> find_split_preset(std::string_view name);

struct CurateOptions {
  std::uint64_t seed = 0;
  double train_ratio = 0.9;
  std::string split_preset;
  int resolution = 256;
  EdgeExtractorSpec edges;
};

// annotation_store: COCO-style JSON (images[{id,file_name}],
// annotations[{image_id,category_id}], categories[{id,name}]); image files
// live in image_dir. Writes a PAIRED_AB sketch-to-photo dataset to out_dir.
DatasetManifest curate_by_category(const std::filesystem::path& annotation_store,
                                   const std::filesystem::path& image_dir,
                                   const std::string& category,
                                   const std::filesystem::path& out_dir,
                                   const CurateOptions& opts);

// Writes edge maps for trainB/testB into trainA/testA and returns the manifest.
DatasetManifest prepare_sketches(const std::filesystem::path& dataset_dir, std::string name,
                                 const EdgeExtractorSpec& spec, int resolution);

// Random shape scenes with exact class masks (classes of synthetic_palette()).
struct SyntheticScene {
  cv::Mat color;  // CV_8UC3, RGB
  cv::Mat mask;   // CV_8UC1 class ids
};

SyntheticScene render_synthetic_scene(std::mt19937_64& rng, int resolution);
// Flat colour per class for label-to-photo sources (RGB).
cv::Mat render_label_map(const cv::Mat& mask);

struct SynthOptions {
  int train = 256;
  int test = 64;
  int resolution = 64;
  std::uint64_t seed = 0;
  Task task = Task::kSketch2Photo;
  EdgeExtractorSpec edges;
};

DatasetManifest synthesize_dataset(const std::filesystem::path& out_dir,
                                   const SynthOptions& opts);

// Class-index masks: written as binary PGM under the .mask extension.
void write_mask(const std::filesystem::path& path, const cv::Mat& mask);
cv::Mat read_mask(const std::filesystem::path& path);

void write_rgb(const std::filesystem::path& path, const cv::Mat& rgb);
// Reads as RGB (channels = 3) or grey (channels = 1).
cv::Mat read_image(const std::filesystem::path& path, int channels);
cv::Mat resize_square(const cv::Mat& img, int resolution);

// 8-bit H x W x C -> C x H x W in [-1, 1].
torch::Tensor to_tensor(const cv::Mat& img);
// C x H x W in [-1, 1] -> 8-bit image (RGB or grey).
cv::Mat to_image(const torch::Tensor& t);

// Decoded, resized images of one split held in memory.
class ImageDataset {
 public:
  ImageDataset(const DatasetManifest& manifest, const std::string& split);

  std::size_t source_size() const { return source_.size(); }
  std::size_t target_size() const { return target_.size(); }
  int source_channels() const { return source_channels_; }
  const std::vector<std::string>& source_stems() const { return source_stems_; }
  const std::vector<std::string>& target_stems() const { return target_stems_; }

  torch::Tensor source(std::size_t i) const { return to_tensor(source_[i]); }
  torch::Tensor target(std::size_t i) const { return to_tensor(target_[i]); }
  // Ground-truth masks for the target images, empty Mat when absent.
  const cv::Mat& target_mask(std::size_t i) const { return masks_[i]; }
  bool has_masks() const;

  Domain source_domain() const {
    return task_ == Task::kSketch2Photo ? Domain::kSketch : Domain::kLabelMap;
  }
  Layout layout() const { return layout_; }

 private:
  Task task_;
  Layout layout_;
  int source_channels_;
  std::vector<cv::Mat> source_;
  std::vector<cv::Mat> target_;
  std::vector<cv::Mat> masks_;
  std::vector<std::string> source_stems_;
  std::vector<std::string> target_stems_;
};

// One epoch's index plan; drawn on the control thread so delivery order is
// independent of prefetch depth.
struct EpochPlan {
  std::vector<std::vector<std::size_t>> source;
  std::vector<std::vector<std::size_t>> target;
};

class BatchSampler {
 public:
  BatchSampler(const ImageDataset& data, int batch_size, SampleMode mode);

  std::size_t steps_per_epoch() const;
  EpochPlan plan_epoch(std::mt19937_64& rng) const;
  TranslationBatch assemble(const EpochPlan& plan, std::size_t step) const;
  SampleMode mode() const { return mode_; }

 private:
  const ImageDataset& data_;
  int batch_size_;
  SampleMode mode_;
};

// Delivers the batches of one plan in order, assembling up to `depth` ahead on
// a worker thread (depth 0 = synchronous).
class EpochLoader {
 public:
  EpochLoader(const BatchSampler& sampler, EpochPlan plan, int depth);
  ~EpochLoader();
  EpochLoader(const EpochLoader&) = delete;
  EpochLoader& operator=(const EpochLoader&) = delete;

  std::optional<TranslationBatch> next();

 private:
  struct State;
  std::unique_ptr<State> state_;
};

}  // namespace asl
