#include "asl/hashing.hpp"

#include <openssl/evp.h>

#include <cstdio>

namespace asl {

Hasher::Hasher() : ctx_(EVP_MD_CTX_new()) {
  EVP_DigestInit_ex(static_cast<EVP_MD_CTX*>(ctx_), EVP_sha256(), nullptr);
}

Hasher::~Hasher() { EVP_MD_CTX_free(static_cast<EVP_MD_CTX*>(ctx_)); }

Hasher& Hasher::update(std::span<const unsigned char> bytes) {
  EVP_DigestUpdate(static_cast<EVP_MD_CTX*>(ctx_), bytes.data(), bytes.size());
  return *this;
}

Hasher& Hasher::update(std::string_view text) {
  return update(std::span(reinterpret_cast<const unsigned char*>(text.data()), text.size()));
}

Hasher& Hasher::update(const torch::Tensor& t) {
  auto c = t.detach().to(torch::kCPU).contiguous();
  std::string header = std::string(c.dtype().name()) + "[";
  for (auto s : c.sizes()) header += std::to_string(s) + ",";
  header += "]";
  update(header);
  return update(std::span(static_cast<const unsigned char*>(c.data_ptr()), c.nbytes()));
}

std::string Hasher::hex() {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(static_cast<EVP_MD_CTX*>(ctx_), digest, &len);
  std::string out;
  out.reserve(len * 2);
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof(buf), "%02x", digest[i]);
    out += buf;
  }
  return out;
}

std::string sha256_hex(std::span<const unsigned char> bytes) {
  Hasher h;
  return h.update(bytes).hex();
}

std::string tensor_checksum(const std::vector<torch::Tensor>& tensors) {
  Hasher h;
  for (const auto& t : tensors) h.update(t);
  return h.hex();
}

}  // namespace asl
