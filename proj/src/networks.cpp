#include "asl/networks.hpp"

#include <atomic>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "asl/error.hpp"
#include "asl/hashing.hpp"

namespace asl {

namespace nn = torch::nn;

namespace {

nn::Conv2d conv(int in, int out, int k, int stride, int pad, bool bias) {
  return nn::Conv2d(nn::Conv2dOptions(in, out, k).stride(stride).padding(pad).bias(bias));
}

nn::InstanceNorm2d inorm(int c) { return nn::InstanceNorm2d(nn::InstanceNorm2dOptions(c)); }

class ResnetBlockImpl : public nn::Module {
 public:
  explicit ResnetBlockImpl(int c) {
    body_ = register_module(
        "body", nn::Sequential(nn::ReflectionPad2d(1), conv(c, c, 3, 1, 0, false), inorm(c),
                               nn::ReLU(), nn::ReflectionPad2d(1), conv(c, c, 3, 1, 0, false),
                               inorm(c)));
  }
  torch::Tensor forward(const torch::Tensor& x) { return x + body_->forward(x); }

 private:
  nn::Sequential body_{nullptr};
};
TORCH_MODULE(ResnetBlock);

// c7s1-w, d2w, d4w, R4w x n, u2w, uw, c7s1-out, tanh.
class ResnetGenerator final : public GeneratorImpl {
 public:
  explicit ResnetGenerator(const GeneratorSpec& s) : GeneratorImpl(s) {
    const int w = s.base_width;
    nn::Sequential m;
    m->push_back(nn::ReflectionPad2d(3));
    m->push_back(conv(s.in_channels, w, 7, 1, 0, false));
    m->push_back(inorm(w));
    m->push_back(nn::ReLU());
    for (int i = 0; i < 2; ++i) {
      const int c = w << i;
      m->push_back(conv(c, 2 * c, 3, 2, 1, false));
      m->push_back(inorm(2 * c));
      m->push_back(nn::ReLU());
    }
    for (int i = 0; i < s.n_blocks; ++i) m->push_back(ResnetBlock(4 * w));
    for (int i = 2; i > 0; --i) {
      const int c = w << i;
      m->push_back(nn::ConvTranspose2d(
          nn::ConvTranspose2dOptions(c, c / 2, 3).stride(2).padding(1).output_padding(1).bias(false)));
      m->push_back(inorm(c / 2));
      m->push_back(nn::ReLU());
    }
    m->push_back(nn::ReflectionPad2d(3));
    m->push_back(conv(w, s.out_channels, 7, 1, 0, true));
    m->push_back(nn::Tanh());
    model_ = register_module("model", m);
  }

  torch::Tensor forward(const torch::Tensor& x) override { return model_->forward(x); }

 private:
  nn::Sequential model_{nullptr};
};

// Pix2Pix-style U-Net with `depth` stride-2 stages and skip connections.
class UnetGenerator final : public GeneratorImpl {
 public:
  explicit UnetGenerator(const GeneratorSpec& s) : GeneratorImpl(s) {
    const int d = s.depth;
    std::vector<int> ch(d);
    for (int i = 0; i < d; ++i) ch[i] = s.base_width * std::min(1 << std::min(i, 3), 8);
    for (int i = 0; i < d; ++i) {
      nn::Sequential down;
      const int in = i == 0 ? s.in_channels : ch[i - 1];
      const bool outer = i == 0;
      const bool inner = i == d - 1;
      if (!outer) down->push_back(nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)));
      down->push_back(conv(in, ch[i], 4, 2, 1, outer || inner));
      if (!outer && !inner) down->push_back(inorm(ch[i]));
      downs_.push_back(register_module("down" + std::to_string(i), down));
    }
    for (int i = 0; i < d; ++i) {
      nn::Sequential up;
      const bool outer = i == 0;
      const bool inner = i == d - 1;
      const int in = inner ? ch[i] : 2 * ch[i];
      const int out = outer ? s.out_channels : ch[i - 1];
      up->push_back(nn::ReLU());
      up->push_back(nn::ConvTranspose2d(
          nn::ConvTranspose2dOptions(in, out, 4).stride(2).padding(1).bias(outer)));
      if (outer) {
        up->push_back(nn::Tanh());
      } else {
        up->push_back(inorm(out));
      }
      ups_.push_back(register_module("up" + std::to_string(i), up));
    }
  }

  torch::Tensor forward(const torch::Tensor& x) override {
    const auto d = downs_.size();
    std::vector<torch::Tensor> skips(d);
    torch::Tensor h = x;
    for (std::size_t i = 0; i < d; ++i) {
      h = downs_[i]->forward(h);
      skips[i] = h;
    }
    for (std::size_t i = d; i-- > 0;) {
      if (i + 1 < d) h = torch::cat({skips[i], h}, 1);
      h = ups_[i]->forward(h);
    }
    return h;
  }

 private:
  std::vector<nn::Sequential> downs_;
  std::vector<nn::Sequential> ups_;
};

void init_weights(nn::Module& m) {
  torch::NoGradGuard no_grad;
  for (auto& item : m.named_parameters()) {
    if (item.key().ends_with("bias")) {
      item.value().zero_();
    } else {
      item.value().normal_(0.0, 0.02);
    }
  }
}

std::atomic<std::int64_t> g_discriminators_built{0};

}  // namespace

std::int64_t DiscriminatorImpl::constructed() { return g_discriminators_built.load(); }

DiscriminatorImpl::DiscriminatorImpl(DiscriminatorSpec spec) : spec_(spec) {
  ++g_discriminators_built;
  const int w = spec.base_width;
  nn::Sequential m;
  auto lrelu = [] { return nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)); };
  m->push_back(conv(spec.in_channels, w, 4, 2, 1, true));
  m->push_back(lrelu());
  int c = w;
  for (int i = 1; i < spec.n_layers; ++i) {
    const int next = w * std::min(1 << i, 8);
    m->push_back(conv(c, next, 4, 2, 1, false));
    m->push_back(inorm(next));
    m->push_back(lrelu());
    c = next;
  }
  const int next = w * std::min(1 << spec.n_layers, 8);
  m->push_back(conv(c, next, 4, 1, 1, false));
  m->push_back(inorm(next));
  m->push_back(lrelu());
  m->push_back(conv(next, 1, 4, 1, 1, true));
  body_ = register_module("model", m);
}

torch::Tensor DiscriminatorImpl::forward(const torch::Tensor& x) {
  if (x.dim() != 4 || x.size(1) != spec_.in_channels) {
    throw Error(ErrorCode::kChannelMismatch,
                "discriminator expects " + std::to_string(spec_.in_channels) +
                    " channels, got " + (x.dim() == 4 ? std::to_string(x.size(1)) : "non-4D"));
  }
  auto out = body_->forward(x);
  if (!spec_.patch_output) out = out.mean({2, 3}).view({x.size(0), 1});
  return out;
}

torch::Tensor DiscriminatorImpl::forward(const SegmentationMap& map) {
  const bool ok = (spec_.kind == DiscriminatorKind::kSegBinary && map.kind == MapKind::kBinary) ||
                  (spec_.kind == DiscriminatorKind::kSegMulticlass &&
                   map.kind == MapKind::kMulticlass);
  if (!ok) {
    throw Error(ErrorCode::kChannelMismatch,
                std::string("discriminator rejects ") + std::string(to_string(map.kind)) + " map");
  }
  return forward(map.scores);
}

Generator build_generator(const GeneratorSpec& spec, std::uint64_t seed) {
  if (spec.in_channels < 1 || spec.out_channels < 1 || spec.base_width < 1) {
    throw Error(ErrorCode::kConfigInvalid, "generator channels must be positive");
  }
  torch::manual_seed(seed);
  Generator g;
  switch (spec.arch) {
    case GeneratorArch::kResnetBlocks:
      g = std::make_shared<ResnetGenerator>(spec);
      break;
    case GeneratorArch::kUnet:
      if (spec.depth < 1) throw Error(ErrorCode::kUnsupportedArch, "unet depth < 1");
      g = std::make_shared<UnetGenerator>(spec);
      break;
    default:
      throw Error(ErrorCode::kUnsupportedArch, "unknown generator arch");
  }
  init_weights(*g);
  return g;
}

Discriminator build_discriminator(const DiscriminatorSpec& spec, std::uint64_t seed) {
  if (spec.in_channels < 1 || spec.base_width < 1 || spec.n_layers < 0) {
    throw Error(ErrorCode::kConfigInvalid, "bad discriminator spec");
  }
  torch::manual_seed(seed);
  auto d = std::make_shared<DiscriminatorImpl>(spec);
  init_weights(*d);
  return d;
}

std::int64_t patch_output_size(std::int64_t input, int n_layers) {
  auto step = [](std::int64_t in, int k, int s, int p) { return (in + 2 * p - k) / s + 1; };
  std::int64_t h = input;
  for (int i = 0; i < n_layers; ++i) h = step(h, 4, 2, 1);
  h = step(h, 4, 1, 1);
  return step(h, 4, 1, 1);
}

std::int64_t resnet_block_parameter_count(int base_width) {
  const std::int64_t c = 4 * base_width;
  return 2 * 9 * c * c;
}

std::int64_t parameter_count(const nn::Module& m) {
  std::int64_t n = 0;
  for (const auto& p : m.parameters()) n += p.numel();
  return n;
}

std::string parameter_checksum(const nn::Module& m) { return tensor_checksum(m.parameters()); }

bool Checkpoint::has_role(const std::string& r) const {
  const std::string prefix = r + "/";
  auto it = tensors.lower_bound(prefix);
  return it != tensors.end() && it->first.starts_with(prefix);
}

void Checkpoint::put_module(const std::string& r, const nn::Module& m) {
  for (const auto& item : m.named_parameters()) {
    tensors[r + "/" + item.key()] = item.value().detach().clone();
  }
  for (const auto& item : m.named_buffers()) {
    tensors[r + "/" + item.key()] = item.value().detach().clone();
  }
}

void Checkpoint::load_module(const std::string& r, nn::Module& m) const {
  torch::NoGradGuard no_grad;
  auto copy = [&](const std::string& name, torch::Tensor& dst) {
    auto it = tensors.find(r + "/" + name);
    if (it == tensors.end()) {
      throw Error(ErrorCode::kCheckpointCorrupt, "missing tensor " + r + "/" + name);
    }
    if (it->second.sizes() != dst.sizes()) {
      throw Error(ErrorCode::kCheckpointCorrupt, "shape mismatch for " + r + "/" + name);
    }
    dst.copy_(it->second);
  };
  for (auto& item : m.named_parameters()) copy(item.key(), item.value());
  for (auto& item : m.named_buffers()) copy(item.key(), item.value());
}

namespace {

constexpr char kCkptMagic[8] = {'A', 'S', 'L', 'C', 'K', 'P', 'T', '\0'};

std::string dtype_name(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat32: return "f32";
    case torch::kFloat64: return "f64";
    case torch::kInt64: return "i64";
    default: throw Error(ErrorCode::kCheckpointCorrupt, "unsupported dtype in checkpoint");
  }
}

torch::ScalarType dtype_from(const std::string& s) {
  if (s == "f32") return torch::kFloat32;
  if (s == "f64") return torch::kFloat64;
  if (s == "i64") return torch::kInt64;
  throw Error(ErrorCode::kCheckpointCorrupt, "unknown dtype '" + s + "'");
}

void append_le(std::string& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t read_le(const char* p, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

}  // namespace

void Checkpoint::save(const std::string& path) const {
  nlohmann::json header;
  header["config"] = config_text;
  header["epoch"] = epoch;
  header["global_step"] = global_step;
  header["rng_state"] = rng_state;
  std::string blob;
  nlohmann::json index = nlohmann::json::array();
  for (const auto& [key, t] : tensors) {
    auto c = t.detach().to(torch::kCPU).contiguous();
    std::vector<std::int64_t> shape(c.sizes().begin(), c.sizes().end());
    index.push_back({{"key", key},
                     {"dtype", dtype_name(c.scalar_type())},
                     {"shape", shape},
                     {"offset", blob.size()},
                     {"nbytes", c.nbytes()}});
    blob.append(static_cast<const char*>(c.data_ptr()), c.nbytes());
  }
  header["tensors"] = index;
  const std::string header_text = header.dump();

  std::string out(kCkptMagic, sizeof(kCkptMagic));
  append_le(out, kVersion, 4);
  append_le(out, header_text.size(), 8);
  out += header_text;
  out += blob;

  std::filesystem::path tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    f.flush();
    if (!f) throw Error(ErrorCode::kDiskFull, "cannot write checkpoint " + path);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorCode::kMissingGeneratorRole, "cannot open checkpoint '" + path + "'");
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < 20 || std::memcmp(buf.data(), kCkptMagic, sizeof(kCkptMagic)) != 0) {
    throw Error(ErrorCode::kCheckpointCorrupt, "not a checkpoint: " + path);
  }
  const auto version = read_le(buf.data() + 8, 4);
  if (version != kVersion) {
    throw Error(ErrorCode::kCheckpointCorrupt, "unsupported checkpoint version " +
                                                   std::to_string(version));
  }
  const auto header_len = read_le(buf.data() + 12, 8);
  if (20 + header_len > buf.size()) throw Error(ErrorCode::kCheckpointCorrupt, "truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(buf.begin() + 20, buf.begin() + 20 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kCheckpointCorrupt, e.what());
  }
  const std::size_t base = 20 + header_len;
  Checkpoint ck;
  ck.config_text = header.at("config").get<std::string>();
  ck.epoch = header.at("epoch").get<int>();
  ck.global_step = header.at("global_step").get<std::int64_t>();
  ck.rng_state = header.at("rng_state").get<std::string>();
  for (const auto& e : header.at("tensors")) {
    const auto offset = e.at("offset").get<std::size_t>();
    const auto nbytes = e.at("nbytes").get<std::size_t>();
    if (base + offset + nbytes > buf.size()) {
      throw Error(ErrorCode::kCheckpointCorrupt, "truncated tensor data");
    }
    auto shape = e.at("shape").get<std::vector<std::int64_t>>();
    auto t = torch::empty(shape, dtype_from(e.at("dtype").get<std::string>()));
    if (t.nbytes() != nbytes) throw Error(ErrorCode::kCheckpointCorrupt, "size mismatch");
    std::memcpy(t.data_ptr(), buf.data() + base + offset, nbytes);
    ck.tensors.emplace(e.at("key").get<std::string>(), t);
  }
  return ck;
}

}  // namespace asl
