#include "asl/segbackend.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <iostream>
#include <set>

#include <torch/script.h>

#include "asl/error.hpp"
#include "asl/hashing.hpp"

namespace asl {

namespace fs = std::filesystem;

SegBackend::SegBackend(int class_count, std::vector<int> foreground_ids, bool soft_output)
    : class_count_(class_count),
      foreground_ids_(std::move(foreground_ids)),
      soft_output_(soft_output) {
  std::set<int> fg(foreground_ids_.begin(), foreground_ids_.end());
  if (fg.empty()) throw Error(ErrorCode::kEmptyForegroundSet, "no foreground classes");
  if (*fg.begin() < 0 || *fg.rbegin() >= class_count_ ||
      static_cast<int>(fg.size()) >= class_count_) {
    throw Error(ErrorCode::kConfigInvalid,
                "foreground ids must be a strict subset of the class indices");
  }
  foreground_ids_.assign(fg.begin(), fg.end());
}

std::string SegBackend::parameter_checksum() const { return tensor_checksum(parameters()); }

double SegBackend::gradient_abs_sum() const {
  double total = 0.0;
  for (const auto& p : parameters()) {
    if (p.grad().defined()) total += p.grad().abs().sum().item<double>();
  }
  return total;
}

bool SegBackend::supports_size(std::int64_t h, std::int64_t w) const { return h > 0 && w > 0; }

SegmentationMap SegBackend::segment_multiclass(const ImageBatch& batch) {
  if (!loaded()) throw Error(ErrorCode::kBackendNotLoaded, name());
  if (batch.domain() != Domain::kColor) {
    throw Error(ErrorCode::kKindMismatch, "segmentation expects colour images");
  }
  if (!supports_size(batch.height(), batch.width())) {
    throw Error(ErrorCode::kResolutionMismatch,
                "backend " + name() + " does not accept " + std::to_string(batch.height()) +
                    "x" + std::to_string(batch.width()));
  }
  forward_count_ += batch.size();
  torch::Tensor z = logits(batch.data());
  if (z.size(1) != class_count_) {
    throw Error(ErrorCode::kShapeMismatch, "backend produced " + std::to_string(z.size(1)) +
                                               " classes, expected " +
                                               std::to_string(class_count_));
  }
  if (z.size(2) != batch.height() || z.size(3) != batch.width()) {
    z = torch::nn::functional::interpolate(
        z, torch::nn::functional::InterpolateFuncOptions()
               .size(std::vector<int64_t>{batch.height(), batch.width()})
               .mode(torch::kBilinear)
               .align_corners(false));
  }
  torch::Tensor scores;
  if (soft_output_) {
    scores = torch::softmax(z, 1);
  } else {
    scores = torch::zeros_like(z).scatter_(1, z.argmax(1, true), 1.0);
  }
  return {scores, MapKind::kMulticlass};
}

StubSegBackend::StubSegBackend(int class_count, std::vector<int> foreground_ids)
    : SegBackend(class_count, std::move(foreground_ids)) {}

StubSegBackend::StubSegBackend(torch::Tensor prototypes, std::vector<int> foreground_ids,
                               double temperature)
    : SegBackend(static_cast<int>(prototypes.size(0)), std::move(foreground_ids)) {
  prototypes_ = prototypes.to(torch::kFloat64).contiguous();
  if (prototypes_.dim() != 2 || prototypes_.size(1) != 3) {
    throw Error(ErrorCode::kShapeMismatch, "prototypes must be K x 3");
  }
  // -|p - c|^2 / t = (2 p.c - |c|^2) / t - |p|^2 / t
  weight_ = (2.0 * prototypes_ / temperature).view({prototypes_.size(0), 3, 1, 1}).to(torch::kFloat32);
  bias_ = (-prototypes_.pow(2).sum(1) / temperature).to(torch::kFloat32);
  weight_.set_requires_grad(false);
  bias_.set_requires_grad(false);
}

std::unique_ptr<StubSegBackend> StubSegBackend::constant(int class_count,
                                                         std::vector<int> foreground_ids) {
  std::unique_ptr<StubSegBackend> b(new StubSegBackend(class_count, std::move(foreground_ids)));
  b->prototypes_ = torch::zeros({class_count, 3}, torch::kFloat64);
  b->weight_ = torch::zeros({class_count, 3, 1, 1});
  b->bias_ = torch::zeros({class_count});
  return b;
}

torch::Tensor StubSegBackend::logits(const torch::Tensor& images) {
  if (images.size(1) != 3) throw Error(ErrorCode::kChannelMismatch, "stub backend expects RGB");
  return torch::conv2d(images, weight_.to(images.dtype()), bias_.to(images.dtype()));
}

struct TorchScriptSegBackend::Impl {
  torch::jit::script::Module module;
};

TorchScriptSegBackend::TorchScriptSegBackend(const std::string& path, int class_count,
                                             std::vector<int> foreground_ids,
                                             int input_multiple)
    : SegBackend(class_count, std::move(foreground_ids)),
      impl_(std::make_shared<Impl>()),
      path_(path),
      input_multiple_(input_multiple) {
  if (path.empty() || !fs::exists(path)) {
    throw Error(ErrorCode::kMissingWeights, "segmentation weights not found: '" + path + "'");
  }
  try {
    impl_->module = torch::jit::load(path);
  } catch (const c10::Error& e) {
    throw Error(ErrorCode::kBackendNotLoaded, e.what_without_backtrace());
  }
  impl_->module.eval();
  for (auto p : impl_->module.parameters()) p.set_requires_grad(false);
  loaded_ = true;
}

std::vector<torch::Tensor> TorchScriptSegBackend::parameters() const {
  std::vector<torch::Tensor> out;
  for (const auto& p : impl_->module.parameters()) out.push_back(p);
  return out;
}

bool TorchScriptSegBackend::supports_size(std::int64_t h, std::int64_t w) const {
  return h > 0 && w > 0 && h % input_multiple_ == 0 && w % input_multiple_ == 0;
}

torch::Tensor TorchScriptSegBackend::logits(const torch::Tensor& images) {
  return impl_->module.forward({images}).toTensor();
}

torch::Tensor synthetic_palette() {
  const float rgb[5][3] = {
      {110, 160, 230},  // sky
      {70, 150, 60},    // grass
      {40, 80, 160},    // water
      {210, 40, 40},    // box
      {230, 200, 40},   // ball
  };
  auto t = torch::from_blob(const_cast<float*>(&rgb[0][0]), {5, 3}, torch::kFloat32).clone();
  return (t / 127.5 - 1.0).to(torch::kFloat64);
}

std::vector<int> synthetic_foreground_ids() { return {3, 4}; }

std::unique_ptr<SegBackend> make_seg_backend(const NetworkConfig& cfg) {
  if (cfg.seg_backend == BackendKind::kPretrained) {
    return std::make_unique<TorchScriptSegBackend>(cfg.seg_weights, cfg.seg_classes,
                                                   cfg.seg_foreground);
  }
  auto palette = synthetic_palette();
  if (cfg.seg_classes != palette.size(0)) {
    throw Error(ErrorCode::kConfigInvalid,
                "stub backend is keyed to the " + std::to_string(palette.size(0)) +
                    "-class synthetic palette; seg_classes is " +
                    std::to_string(cfg.seg_classes));
  }
  return std::make_unique<StubSegBackend>(palette, cfg.seg_foreground, cfg.seg_temperature);
}

SegmentationMap collapse_to_binary(const SegmentationMap& map,
                                   const std::vector<int>& foreground_ids) {
  if (map.kind != MapKind::kMulticlass) {
    throw Error(ErrorCode::kKindMismatch, "collapse expects a multiclass map");
  }
  if (foreground_ids.empty()) throw Error(ErrorCode::kEmptyForegroundSet, "no foreground ids");
  const auto k = map.class_count();
  std::vector<char> is_fg(k, 0);
  for (int id : foreground_ids) {
    if (id < 0 || id >= k) {
      throw Error(ErrorCode::kConfigInvalid, "foreground id " + std::to_string(id) +
                                                 " outside [0, " + std::to_string(k) + ")");
    }
    is_fg[id] = 1;
  }
  std::vector<int64_t> fg, bg;
  for (int64_t c = 0; c < k; ++c) (is_fg[c] ? fg : bg).push_back(c);
  auto opts = torch::TensorOptions().dtype(torch::kLong).device(map.scores.device());
  auto fg_sum = map.scores.index_select(1, torch::tensor(fg, opts)).sum(1, true);
  auto bg_sum = bg.empty() ? torch::zeros_like(fg_sum)
                           : map.scores.index_select(1, torch::tensor(bg, opts)).sum(1, true);
  return {torch::cat({bg_sum, fg_sum}, 1), MapKind::kBinary};
}

SegCache::SegCache(fs::path dir, SegBackend& backend)
    : dir_(std::move(dir)), backend_(backend), backend_checksum_(backend.parameter_checksum()) {
  fs::create_directories(dir_);
}

std::string SegCache::image_key(const torch::Tensor& image) const {
  Hasher h;
  h.update(backend_checksum_);
  h.update(image.to(torch::kFloat32));
  return h.hex();
}

fs::path SegCache::entry_path(const std::string& key) const { return dir_ / (key + ".segmap"); }

namespace {

constexpr char kMagic[7] = {'A', 'S', 'L', 'S', 'E', 'G', '1'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

}  // namespace

void SegCache::write_entry(const fs::path& path, const torch::Tensor& scores) {
  auto s = scores.detach().to(torch::kFloat32).contiguous();
  std::string out(kMagic, sizeof(kMagic));
  put_u32(out, static_cast<std::uint32_t>(s.size(0)));
  put_u32(out, static_cast<std::uint32_t>(s.size(1)));
  put_u32(out, static_cast<std::uint32_t>(s.size(2)));
  const float* data = s.data_ptr<float>();
  for (int64_t i = 0; i < s.numel(); ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, data + i, 4);
    put_u32(out, bits);
  }
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw Error(ErrorCode::kDiskFull, "cannot write " + tmp.string());
  }
  fs::rename(tmp, path);
}

torch::Tensor SegCache::read_entry(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) return {};
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  constexpr std::size_t kHeader = sizeof(kMagic) + 12;
  if (buf.size() < kHeader || std::memcmp(buf.data(), kMagic, sizeof(kMagic)) != 0) {
    throw Error(ErrorCode::kCacheCorrupt, "bad header in " + path.string());
  }
  const char* p = buf.data() + sizeof(kMagic);
  const std::uint64_t k = get_u32(p), h = get_u32(p + 4), w = get_u32(p + 8);
  if (buf.size() != kHeader + 4 * k * h * w) {
    throw Error(ErrorCode::kCacheCorrupt, "truncated record " + path.string());
  }
  auto out = torch::empty({static_cast<int64_t>(k), static_cast<int64_t>(h),
                           static_cast<int64_t>(w)}, torch::kFloat32);
  float* data = out.data_ptr<float>();
  for (std::uint64_t i = 0; i < k * h * w; ++i) {
    std::uint32_t bits = get_u32(buf.data() + kHeader + 4 * i);
    std::memcpy(data + i, &bits, 4);
  }
  return out;
}

SegCache::Result SegCache::segment_cached(const ImageBatch& batch) {
  const auto n = batch.size();
  std::vector<std::string> keys(n);
  std::vector<torch::Tensor> maps(n);
  std::vector<bool> hits(n, false);
  std::vector<int64_t> missing;
  {
    std::lock_guard lock(mutex_);
    for (int64_t i = 0; i < n; ++i) {
      keys[i] = image_key(batch.data()[i]);
      if (auto it = memory_.find(keys[i]); it != memory_.end()) {
        maps[i] = it->second;
        hits[i] = true;
        continue;
      }
      torch::Tensor entry;
      try {
        entry = read_entry(entry_path(keys[i]));
      } catch (const Error&) {
        entry = torch::Tensor();
        ++corrupt_;
        std::cerr << "[segcache] warning: corrupt entry " << keys[i] << ", recomputing\n";
      }
      const bool valid = entry.defined() && entry.size(0) == backend_.class_count() &&
                         entry.size(1) == batch.height() && entry.size(2) == batch.width() &&
                         entry.isfinite().all().item<bool>() &&
                         (entry.sum(0) - 1.0).abs().max().item<double>() < 1e-4;
      if (entry.defined() && !valid) {
        ++corrupt_;
        std::cerr << "[segcache] warning: invalid entry " << keys[i] << ", recomputing\n";
      }
      if (valid) {
        memory_.emplace(keys[i], entry);
        maps[i] = entry;
        hits[i] = true;
      } else {
        missing.push_back(i);
      }
    }
  }
  if (!missing.empty()) {
    auto idx = torch::tensor(missing, torch::kLong);
    torch::NoGradGuard no_grad;
    ImageBatch sub(batch.data().detach().index_select(0, idx), Domain::kColor, batch.range());
    auto scores = backend_.segment_multiclass(sub).scores.to(torch::kFloat32);
    std::lock_guard lock(mutex_);
    for (std::size_t j = 0; j < missing.size(); ++j) {
      const auto i = missing[j];
      auto s = scores[static_cast<int64_t>(j)].contiguous().clone();
      write_entry(entry_path(keys[i]), s);
      memory_[keys[i]] = s;
      maps[i] = s;
    }
  }
  {
    std::lock_guard lock(mutex_);
    for (bool hit : hits) (hit ? hits_ : misses_) += 1;
  }
  SegmentationMap multi{torch::stack(maps).to(batch.data().dtype()), MapKind::kMulticlass};
  SegmentationMap binary = collapse_to_binary(multi, backend_.foreground_ids());
  return {multi, binary, hits};
}

}  // namespace asl
