#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "asl/config.hpp"
#include "asl/types.hpp"

namespace asl {

struct GeneratorSpec {
  GeneratorArch arch = GeneratorArch::kResnetBlocks;
  int in_channels = 1;
  int out_channels = 3;
  int base_width = 64;
  int n_blocks = 9;  // RESNET_BLOCKS
  int depth = 8;     // UNET
};

enum class DiscriminatorKind { kImage, kSegBinary, kSegMulticlass };

struct DiscriminatorSpec {
  DiscriminatorKind kind = DiscriminatorKind::kImage;
  int in_channels = 3;
  int base_width = 64;
  int n_layers = 3;
  bool patch_output = true;
};

// Image -> image network with a tanh head, outputs in [-1, 1].
class GeneratorImpl : public torch::nn::Module {
 public:
  virtual torch::Tensor forward(const torch::Tensor& x) = 0;
  const GeneratorSpec& spec() const { return spec_; }

 protected:
  explicit GeneratorImpl(GeneratorSpec spec) : spec_(spec) {}
  GeneratorSpec spec_;
};

using Generator = std::shared_ptr<GeneratorImpl>;

// Patch discriminator emitting raw logits, N x 1 x h' x w' (or N x 1).
class DiscriminatorImpl : public torch::nn::Module {
 public:
  explicit DiscriminatorImpl(DiscriminatorSpec spec);

  // Checks the channel count against the declared input.
  torch::Tensor forward(const torch::Tensor& x);
  // Checks the map kind against the declared discriminator kind.
  torch::Tensor forward(const SegmentationMap& map);

  const DiscriminatorSpec& spec() const { return spec_; }

  // Instances built in this process (instrumentation).
  static std::int64_t constructed();

 private:
  DiscriminatorSpec spec_;
  torch::nn::Sequential body_{nullptr};
};

using Discriminator = std::shared_ptr<DiscriminatorImpl>;

// Weights ~ N(0, 0.02), biases 0, drawn from torch's generator seeded with `seed`.
Generator build_generator(const GeneratorSpec& spec, std::uint64_t seed);
Discriminator build_discriminator(const DiscriminatorSpec& spec, std::uint64_t seed);

// Spatial size after a PatchGAN with n stride-2 stages and two stride-1 k4 convs.
std::int64_t patch_output_size(std::int64_t input, int n_layers);

// Learnable parameters of one residual block at the given base width.
std::int64_t resnet_block_parameter_count(int base_width);

std::int64_t parameter_count(const torch::nn::Module& m);
std::string parameter_checksum(const torch::nn::Module& m);

// Network roles in checkpoints.
namespace role {
inline constexpr const char* kG = "G";     // source -> colour
inline constexpr const char* kGY = "G_Y";  // colour -> source (unpaired)
inline constexpr const char* kD = "D";     // colour discriminator (conditional when paired)
inline constexpr const char* kDX = "D_X";  // source-domain discriminator (unpaired)
inline constexpr const char* kDB = "D_B";
inline constexpr const char* kDM = "D_M";
}  // namespace role

// Versioned single-file archive: "ASLCKPT\0", u32 version, u64 header length,
// JSON header (metadata + tensor index), raw little-endian tensor bytes.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::string config_text;  // resolved config snapshot
  int epoch = 0;            // completed epochs
  std::int64_t global_step = 0;
  std::string rng_state;
  std::map<std::string, torch::Tensor> tensors;  // "<role>/<name>" or "opt/<role>/..."

  bool has_role(const std::string& role) const;
  void put_module(const std::string& role, const torch::nn::Module& m);
  // Copies stored values into m; throws CheckpointCorrupt on missing/mismatched entries.
  void load_module(const std::string& role, torch::nn::Module& m) const;

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);
};

}  // namespace asl
