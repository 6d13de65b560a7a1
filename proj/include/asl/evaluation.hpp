#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <torch/torch.h>

#include "asl/config.hpp"
#include "asl/datapipe.hpp"
#include "asl/segbackend.hpp"

namespace asl {

// Gaussian fit of a feature set; covariance uses the unbiased (n - 1) estimator.
struct FeatureStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;
  std::int64_t n = 0;
  std::string extractor_id;

  // features: one row per sample, n >= 2.
  static FeatureStats from_features(const Eigen::MatrixXd& features, std::string extractor_id);
  // Exact pooling of two disjoint sample sets.
  static FeatureStats pool(const FeatureStats& a, const FeatureStats& b);
};

// |mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)), clamped to >= 0.
// Tr((S_a S_b)^(1/2)) is taken as Tr((S_a^(1/2) S_b S_a^(1/2))^(1/2)) from two
// symmetric eigendecompositions; eigenvalues in [-1e-6 * scale, 0) clamp to 0.
double frechet_distance(const FeatureStats& a, const FeatureStats& b);

class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual std::string id() const = 0;
  // images: N x 3 x H x W in [-1, 1] -> N x d features.
  virtual Eigen::MatrixXd extract(const torch::Tensor& images) = 0;
};

// Fixed random projection of 16x16 average-pooled pixels followed by tanh.
// The projection depends only on `dim`, never on the run seed.
class StubFeatureExtractor final : public FeatureExtractor {
 public:
  explicit StubFeatureExtractor(int dim = 32);
  std::string id() const override;
  Eigen::MatrixXd extract(const torch::Tensor& images) override;

 private:
  int dim_;
  torch::Tensor projection_;  // 768 x dim
};

// TorchScript feature network (e.g. an Inception pool3 export).
class TorchScriptFeatureExtractor final : public FeatureExtractor {
 public:
  explicit TorchScriptFeatureExtractor(const std::string& path);
  std::string id() const override { return "torchscript:" + path_; }
  Eigen::MatrixXd extract(const torch::Tensor& images) override;

 private:
  struct Impl;
  std::shared_ptr<Impl> impl_;
  std::string path_;
};

std::unique_ptr<FeatureExtractor> make_feature_extractor(const NetworkConfig& cfg);

// Feature statistics memoised by (image set checksum, extractor id).
class FidCache {
 public:
  const FeatureStats& stats(const torch::Tensor& images, FeatureExtractor& extractor);
  std::size_t size() const { return entries_.size(); }

 private:
  std::map<std::string, FeatureStats> entries_;
};

double fid(const torch::Tensor& real_images, const torch::Tensor& fake_images,
           FeatureExtractor& extractor, FidCache* cache = nullptr);

// K x K counts, rows = ground truth, columns = prediction.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int classes);

  // Label maps of equal shape (any integer tensor); labels outside [0, K) are ignored.
  void add(const torch::Tensor& pred, const torch::Tensor& gt);
  ConfusionMatrix& operator+=(const ConfusionMatrix& other);

  int classes() const { return k_; }
  std::int64_t at(int gt, int pred) const { return counts_[static_cast<std::size_t>(gt) * k_ + pred]; }
  std::int64_t total() const;

  // IoU_k = TP / (TP + FP + FN); nullopt for classes absent from both maps.
  std::vector<std::optional<double>> per_class_iou() const;
  double mean_iou() const;

 private:
  int k_;
  std::vector<std::int64_t> counts_;
};

struct MiouResult {
  std::vector<std::optional<double>> per_class;
  double mean = 0.0;
};

MiouResult miou(const torch::Tensor& pred_maps, const torch::Tensor& gt_maps, int classes);

// Argmax labels of a segmentation backend over colour images, N x H x W.
torch::Tensor segment_labels(SegBackend& segmenter, const torch::Tensor& images);

struct MetricSelection {
  bool fid = true;
  bool miou = true;
};

struct MetricReport {
  std::string dataset;
  std::string task;
  std::string baseline;
  std::string variant;
  std::optional<double> fid;
  std::optional<double> miou;
  std::optional<double> oracle_miou;
  std::int64_t n_images = 0;
  std::string extractor_id;

  static std::string csv_header();
  std::string csv_row() const;
};

// Metrics of already generated test outputs against a split.
MetricReport evaluate_outputs(const torch::Tensor& generated, const ImageDataset& test,
                              const MetricSelection& metrics, FeatureExtractor& extractor,
                              SegBackend* segmenter, FidCache* cache = nullptr);

// Colourizes the test split with the checkpoint's generator and scores it;
// the row is keyed by (dataset, task, baseline, variant) from the checkpoint.
MetricReport evaluate_run(const std::string& checkpoint_path, const DatasetManifest& manifest,
                          const MetricSelection& metrics, FeatureExtractor& extractor,
                          SegBackend* segmenter);

void write_report(const std::filesystem::path& path, const std::vector<MetricReport>& rows);

// input | ground truth | outputs..., one row per sample, one PNG per sample.
void write_comparison_grid(const std::filesystem::path& path, const torch::Tensor& input,
                           const torch::Tensor& ground_truth,
                           const std::vector<torch::Tensor>& outputs);

}  // namespace asl
