#pragma once

#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace asl {

std::string sha256_hex(std::span<const unsigned char> bytes);

// Incremental SHA-256 over raw buffers and tensor contents.
class Hasher {
 public:
  Hasher();
  ~Hasher();
  Hasher(const Hasher&) = delete;
  Hasher& operator=(const Hasher&) = delete;

  Hasher& update(std::span<const unsigned char> bytes);
  Hasher& update(std::string_view text);
  // Shape, dtype and contiguous CPU bytes.
  Hasher& update(const torch::Tensor& t);
  std::string hex();

 private:
  void* ctx_;
};

std::string tensor_checksum(const std::vector<torch::Tensor>& tensors);

}  // namespace asl
