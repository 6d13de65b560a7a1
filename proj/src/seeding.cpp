#include "asl/seeding.hpp"

#include <sstream>

#include <torch/torch.h>

#include "asl/error.hpp"

namespace asl {

std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream) {
  // FNV-1a over the stream name, mixed with the run seed through seed_seq.
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : stream) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

SeedState::SeedState(std::uint64_t seed)
    : seed_(seed),
      shuffle_(derive_seed(seed, "shuffle")),
      augment_(derive_seed(seed, "augment")) {}

std::uint64_t SeedState::init_seed(std::string_view role) const {
  return derive_seed(seed_, std::string("init/") + std::string(role));
}

std::string SeedState::serialize() const {
  std::ostringstream out;
  out << seed_ << ' ' << shuffle_ << ' ' << augment_;
  return out.str();
}

void SeedState::restore(const std::string& text) {
  std::istringstream in(text);
  in >> seed_ >> shuffle_ >> augment_;
  if (!in) throw Error(ErrorCode::kCheckpointCorrupt, "bad RNG state record");
}

SeedState seed_all(std::uint64_t seed) {
  torch::manual_seed(derive_seed(seed, "torch"));
  return SeedState(seed);
}

}  // namespace asl
