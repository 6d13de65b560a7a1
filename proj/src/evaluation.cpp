#include "asl/evaluation.hpp"

#include <cmath>
#include <fstream>

#include <Eigen/Eigenvalues>
#include <opencv2/imgcodecs.hpp>
#include <torch/script.h>

#include "asl/error.hpp"
#include "asl/hashing.hpp"
#include "asl/training.hpp"

namespace asl {

namespace fs = std::filesystem;

FeatureStats FeatureStats::from_features(const Eigen::MatrixXd& features, std::string extractor_id) {
  if (features.rows() < 2) {
    throw Error(ErrorCode::kShapeMismatch, "feature statistics need at least 2 samples");
  }
  FeatureStats s;
  s.n = features.rows();
  s.mean = features.colwise().mean().transpose();
  Eigen::MatrixXd centered = features.rowwise() - s.mean.transpose();
  s.covariance = (centered.transpose() * centered) / static_cast<double>(s.n - 1);
  s.extractor_id = std::move(extractor_id);
  return s;
}

FeatureStats FeatureStats::pool(const FeatureStats& a, const FeatureStats& b) {
  if (a.extractor_id != b.extractor_id) throw Error(ErrorCode::kExtractorMismatch, "cannot pool");
  if (a.mean.size() != b.mean.size()) throw Error(ErrorCode::kShapeMismatch, "dimension mismatch");
  FeatureStats s;
  s.n = a.n + b.n;
  const double na = static_cast<double>(a.n), nb = static_cast<double>(b.n);
  const double n = na + nb;
  s.mean = (na * a.mean + nb * b.mean) / n;
  const Eigen::VectorXd delta = a.mean - b.mean;
  s.covariance = ((na - 1) * a.covariance + (nb - 1) * b.covariance +
                  (na * nb / n) * delta * delta.transpose()) /
                 (n - 1);
  s.extractor_id = a.extractor_id;
  return s;
}

namespace {

// Square roots of the eigenvalues of a symmetric PSD matrix, with tiny negative
// eigenvalues clamped to zero.
Eigen::VectorXd sqrt_eigenvalues(const Eigen::MatrixXd& m, Eigen::MatrixXd* vectors) {
  Eigen::MatrixXd sym = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(
      sym, vectors ? Eigen::ComputeEigenvectors : Eigen::EigenvaluesOnly);
  if (solver.info() != Eigen::Success) {
    throw Error(ErrorCode::kNumericalFailure, "eigendecomposition did not converge");
  }
  Eigen::VectorXd ev = solver.eigenvalues();
  const double scale = std::max(1.0, ev.cwiseAbs().maxCoeff());
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev[i] < -1e-6 * scale) {
      throw Error(ErrorCode::kNumericalFailure,
                  "matrix not positive semi-definite (eigenvalue " + std::to_string(ev[i]) + ")");
    }
    ev[i] = std::sqrt(std::max(ev[i], 0.0));
  }
  if (vectors) *vectors = solver.eigenvectors();
  return ev;
}

}  // namespace

double frechet_distance(const FeatureStats& a, const FeatureStats& b) {
  if (a.extractor_id != b.extractor_id) {
    throw Error(ErrorCode::kExtractorMismatch, a.extractor_id + " vs " + b.extractor_id);
  }
  if (a.mean.size() != b.mean.size()) throw Error(ErrorCode::kShapeMismatch, "dimension mismatch");
  Eigen::MatrixXd vecs;
  Eigen::VectorXd roots = sqrt_eigenvalues(a.covariance, &vecs);
  Eigen::MatrixXd sqrt_a = vecs * roots.asDiagonal() * vecs.transpose();
  Eigen::MatrixXd inner = sqrt_a * b.covariance * sqrt_a;
  const double tr_sqrt = sqrt_eigenvalues(inner, nullptr).sum();
  const double d = (a.mean - b.mean).squaredNorm() + a.covariance.trace() +
                   b.covariance.trace() - 2.0 * tr_sqrt;
  if (!std::isfinite(d)) throw Error(ErrorCode::kNumericalFailure, "non-finite distance");
  return std::max(d, 0.0);
}

StubFeatureExtractor::StubFeatureExtractor(int dim) : dim_(dim) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(0x5eedf1dULL + static_cast<std::uint64_t>(dim));
  projection_ = at::normal(0.0, 1.0, {768, dim}, gen, torch::kFloat64) / std::sqrt(768.0) * 4.0;
}

std::string StubFeatureExtractor::id() const { return "stub-proj16-d" + std::to_string(dim_); }

Eigen::MatrixXd StubFeatureExtractor::extract(const torch::Tensor& images) {
  torch::NoGradGuard no_grad;
  auto x = images.detach().to(torch::kFloat64);
  if (x.size(1) == 1) x = x.expand({x.size(0), 3, x.size(2), x.size(3)});
  auto pooled = torch::adaptive_avg_pool2d(x, {16, 16}).reshape({x.size(0), 768});
  auto f = torch::tanh(pooled.matmul(projection_)).contiguous();
  Eigen::MatrixXd out(f.size(0), f.size(1));
  auto acc = f.accessor<double, 2>();
  for (int64_t i = 0; i < f.size(0); ++i) {
    for (int64_t j = 0; j < f.size(1); ++j) out(i, j) = acc[i][j];
  }
  return out;
}

struct TorchScriptFeatureExtractor::Impl {
  torch::jit::script::Module module;
};

TorchScriptFeatureExtractor::TorchScriptFeatureExtractor(const std::string& path)
    : impl_(std::make_shared<Impl>()), path_(path) {
  if (path.empty() || !fs::exists(path)) {
    throw Error(ErrorCode::kMissingWeights, "feature extractor weights not found: '" + path + "'");
  }
  try {
    impl_->module = torch::jit::load(path);
  } catch (const c10::Error& e) {
    throw Error(ErrorCode::kMissingWeights, e.what_without_backtrace());
  }
  impl_->module.eval();
}

Eigen::MatrixXd TorchScriptFeatureExtractor::extract(const torch::Tensor& images) {
  torch::NoGradGuard no_grad;
  auto f = impl_->module.forward({images.to(torch::kFloat32)}).toTensor();
  f = f.reshape({f.size(0), -1}).to(torch::kFloat64).contiguous();
  Eigen::MatrixXd out(f.size(0), f.size(1));
  std::memcpy(out.data(), f.t().contiguous().data_ptr<double>(), sizeof(double) * f.numel());
  return out;
}

std::unique_ptr<FeatureExtractor> make_feature_extractor(const NetworkConfig& cfg) {
  if (cfg.extractor == BackendKind::kPretrained) {
    return std::make_unique<TorchScriptFeatureExtractor>(cfg.extractor_weights);
  }
  return std::make_unique<StubFeatureExtractor>(cfg.extractor_dim);
}

const FeatureStats& FidCache::stats(const torch::Tensor& images, FeatureExtractor& extractor) {
  Hasher h;
  h.update(extractor.id());
  h.update(images.to(torch::kFloat32));
  const std::string key = h.hex();
  auto it = entries_.find(key);
  if (it == entries_.end()) {
    it = entries_.emplace(key, FeatureStats::from_features(extractor.extract(images), extractor.id()))
             .first;
  }
  return it->second;
}

double fid(const torch::Tensor& real_images, const torch::Tensor& fake_images,
           FeatureExtractor& extractor, FidCache* cache) {
  if (real_images.size(0) == 0 || fake_images.size(0) == 0) {
    throw Error(ErrorCode::kEmptyResult, "fid needs non-empty image sets");
  }
  if (cache) {
    const FeatureStats& a = cache->stats(real_images, extractor);
    const FeatureStats& b = cache->stats(fake_images, extractor);
    return frechet_distance(a, b);
  }
  auto a = FeatureStats::from_features(extractor.extract(real_images), extractor.id());
  auto b = FeatureStats::from_features(extractor.extract(fake_images), extractor.id());
  return frechet_distance(a, b);
}

ConfusionMatrix::ConfusionMatrix(int classes)
    : k_(classes), counts_(static_cast<std::size_t>(classes) * classes, 0) {
  if (classes < 1) throw Error(ErrorCode::kShapeMismatch, "confusion matrix needs >= 1 class");
}

void ConfusionMatrix::add(const torch::Tensor& pred, const torch::Tensor& gt) {
  if (pred.sizes() != gt.sizes()) {
    throw Error(ErrorCode::kShapeMismatch, "prediction and ground truth shapes differ");
  }
  auto p = pred.to(torch::kInt64).reshape(-1);
  auto g = gt.to(torch::kInt64).reshape(-1);
  auto valid = (p >= 0) & (p < k_) & (g >= 0) & (g < k_);
  auto flat = (g.masked_select(valid) * k_ + p.masked_select(valid));
  auto bins = torch::bincount(flat, {}, static_cast<int64_t>(k_) * k_).contiguous();
  auto acc = bins.accessor<int64_t, 1>();
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += acc[static_cast<int64_t>(i)];
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  if (other.k_ != k_) throw Error(ErrorCode::kShapeMismatch, "class count mismatch");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  return *this;
}

std::int64_t ConfusionMatrix::total() const {
  std::int64_t t = 0;
  for (auto c : counts_) t += c;
  return t;
}

std::vector<std::optional<double>> ConfusionMatrix::per_class_iou() const {
  std::vector<std::optional<double>> out(k_);
  for (int c = 0; c < k_; ++c) {
    std::int64_t tp = at(c, c), fp = 0, fn = 0;
    for (int o = 0; o < k_; ++o) {
      if (o == c) continue;
      fp += at(o, c);
      fn += at(c, o);
    }
    const std::int64_t denom = tp + fp + fn;
    if (denom > 0) out[c] = static_cast<double>(tp) / static_cast<double>(denom);
  }
  return out;
}

double ConfusionMatrix::mean_iou() const {
  double sum = 0.0;
  int n = 0;
  for (const auto& v : per_class_iou()) {
    if (v) {
      sum += *v;
      ++n;
    }
  }
  return n == 0 ? 0.0 : sum / n;
}

MiouResult miou(const torch::Tensor& pred_maps, const torch::Tensor& gt_maps, int classes) {
  ConfusionMatrix cm(classes);
  cm.add(pred_maps, gt_maps);
  return {cm.per_class_iou(), cm.mean_iou()};
}

torch::Tensor segment_labels(SegBackend& segmenter, const torch::Tensor& images) {
  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> out;
  for (int64_t i = 0; i < images.size(0); i += 32) {
    auto chunk = images.slice(0, i, std::min<int64_t>(i + 32, images.size(0)))
                     .to(torch::kFloat32)
                     .clamp(-1.0, 1.0);
    out.push_back(segmenter.segment_multiclass(ImageBatch(chunk, Domain::kColor)).scores.argmax(1));
  }
  return torch::cat(out, 0);
}

std::string MetricReport::csv_header() {
  return "dataset,task,baseline,variant,fid,miou,oracle_miou,n_images,extractor_id";
}

std::string MetricReport::csv_row() const {
  auto opt = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string(); };
  return dataset + "," + task + "," + baseline + "," + variant + "," + opt(fid) + "," + opt(miou) +
         "," + opt(oracle_miou) + "," + std::to_string(n_images) + "," + extractor_id;
}

namespace {

torch::Tensor stack_targets(const ImageDataset& data) {
  std::vector<torch::Tensor> ys;
  for (std::size_t i = 0; i < data.target_size(); ++i) ys.push_back(data.target(i));
  return torch::stack(ys);
}

torch::Tensor stack_masks(const ImageDataset& data) {
  std::vector<torch::Tensor> ms;
  for (std::size_t i = 0; i < data.target_size(); ++i) {
    const cv::Mat& m = data.target_mask(i);
    ms.push_back(torch::from_blob(m.data, {m.rows, m.cols}, torch::kUInt8).to(torch::kInt64));
  }
  return torch::stack(ms);
}

}  // namespace

MetricReport evaluate_outputs(const torch::Tensor& generated, const ImageDataset& test,
                              const MetricSelection& metrics, FeatureExtractor& extractor,
                              SegBackend* segmenter, FidCache* cache) {
  MetricReport r;
  r.n_images = generated.size(0);
  r.extractor_id = extractor.id();
  const auto real = stack_targets(test);
  if (metrics.fid) r.fid = fid(real, generated, extractor, cache);
  if (metrics.miou && segmenter != nullptr && test.has_masks()) {
    const auto gt = stack_masks(test);
    const int k = segmenter->class_count();
    r.miou = miou(segment_labels(*segmenter, generated), gt, k).mean;
    r.oracle_miou = miou(segment_labels(*segmenter, real), gt, k).mean;
  }
  return r;
}

MetricReport evaluate_run(const std::string& checkpoint_path, const DatasetManifest& manifest,
                          const MetricSelection& metrics, FeatureExtractor& extractor,
                          SegBackend* segmenter) {
  const Checkpoint ck = Checkpoint::load(checkpoint_path);
  if (!ck.has_role(role::kG)) {
    throw Error(ErrorCode::kMissingGeneratorRole, checkpoint_path + " has no generator");
  }
  const Config cfg = checkpoint_config(ck);
  ImageDataset test(manifest, "test");
  std::vector<torch::Tensor> xs;
  for (std::size_t i = 0; i < test.source_size(); ++i) xs.push_back(test.source(i));
  auto generated = colorize(ck, torch::stack(xs));
  MetricReport r = evaluate_outputs(generated, test, metrics, extractor, segmenter);
  r.dataset = manifest.name;
  r.task = std::string(to_string(cfg.run.task));
  r.baseline = std::string(to_string(cfg.objective.baseline));
  r.variant = std::string(to_string(cfg.objective.variant));
  return r;
}

void write_report(const fs::path& path, const std::vector<MetricReport>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIoError, "cannot write report " + path.string());
  out << MetricReport::csv_header() << '\n';
  for (const auto& r : rows) out << r.csv_row() << '\n';
}

void write_comparison_grid(const fs::path& path, const torch::Tensor& input,
                           const torch::Tensor& ground_truth,
                           const std::vector<torch::Tensor>& outputs) {
  auto rgb = [](const torch::Tensor& t) {
    return t.size(0) == 1 ? t.expand({3, t.size(1), t.size(2)}) : t;
  };
  std::vector<torch::Tensor> tiles = {rgb(input), rgb(ground_truth)};
  for (const auto& o : outputs) tiles.push_back(rgb(o));
  cv::Mat grid = to_image(torch::cat(tiles, 2));
  write_rgb(path, grid);
}

}  // namespace asl
