#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace asl {

// Independent RNG streams derived from one run seed. Network initialisation
// goes through torch's global generator, reseeded per role from init_seed().
class SeedState {
 public:
  explicit SeedState(std::uint64_t seed);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t init_seed(std::string_view role) const;
  std::mt19937_64& shuffle() { return shuffle_; }
  std::mt19937_64& augment() { return augment_; }

  std::string serialize() const;
  void restore(const std::string& text);

 private:
  std::uint64_t seed_;
  std::mt19937_64 shuffle_;
  std::mt19937_64 augment_;
};

// Creates the run's streams and seeds torch's global generator.
SeedState seed_all(std::uint64_t seed);

std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream);

}  // namespace asl
