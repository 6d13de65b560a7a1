#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "asl/config.hpp"
#include "asl/datapipe.hpp"
#include "asl/networks.hpp"
#include "asl/objectives.hpp"
#include "asl/seeding.hpp"
#include "asl/segbackend.hpp"

namespace asl {

// The networks a run trains. Unset roles are inactive for the configuration.
struct NetworkSet {
  Generator g;        // source -> colour
  Generator g_y;      // colour -> source (unpaired)
  Discriminator d;    // colour images (source-conditioned when paired)
  Discriminator d_x;  // source images (unpaired)
  Discriminator d_b;  // binary segmentation maps
  Discriminator d_m;  // multiclass segmentation maps

  std::vector<std::pair<std::string, torch::nn::Module*>> roles() const;
};

GeneratorSpec generator_spec(const Config& cfg, int in_channels, int out_channels);
int source_channels(Task task);
NetworkSet build_networks(const Config& cfg, const SeedState& seeds);

struct StepResult {
  LossBreakdown discriminator;
  LossBreakdown generator;
};

// Owns all mutable training state: networks, one Adam per updated group,
// RNG streams and counters. The segmentation backend is borrowed and never
// registered with an optimizer.
class Trainer {
 public:
  // cfg must already be validated. cache_dir holds real-image maps.
  Trainer(Config cfg, SegBackend* backend, std::filesystem::path cache_dir);

  // (1) G forward, (2) real maps from cache and fresh fake maps,
  // (3) image discriminator(s), then D_B, then D_M, each on its own loss,
  // (4) generator(s) on w_g L_G + w_b L_B + w_m L_M.
  StepResult train_step(const TranslationBatch& batch);

  const Config& config() const { return cfg_; }
  const NetworkSet& networks() const { return nets_; }
  SeedState& seeds() { return seeds_; }
  int epoch() const { return epoch_; }
  std::int64_t global_step() const { return global_step_; }
  void set_epoch(int e) { epoch_ = e; }

  // Applies the learning rate for the given (0-based) epoch.
  void set_epoch_learning_rate(int epoch);
  double learning_rate() const;

  Checkpoint checkpoint() const;
  void restore(const Checkpoint& ck);

  // Names of the optimizers and the roles each updates.
  std::map<std::string, std::vector<std::string>> optimizer_roles() const;

 private:
  torch::optim::Adam& optimizer(const std::string& name) { return *optimizers_.at(name); }
  void add_optimizer(const std::string& name, const std::vector<std::string>& roles);

  Config cfg_;
  SegBackend* backend_;
  std::unique_ptr<SegCache> cache_;
  SeedState seeds_;
  NetworkSet nets_;
  std::map<std::string, std::unique_ptr<torch::optim::Adam>> optimizers_;
  std::map<std::string, std::vector<std::string>> optimizer_roles_;
  int epoch_ = 0;
  std::int64_t global_step_ = 0;
};

struct EpochMetrics {
  int epoch = 0;  // 1-based, after that many completed epochs
  std::optional<double> fid;
  std::optional<double> miou;
};

struct TrainOptions {
  std::filesystem::path out_dir;
  std::optional<std::filesystem::path> resume;
  std::filesystem::path cache_dir;  // empty: $ASL_CACHE_DIR or <out_dir>/cache
  // Stop after this many completed epochs (simulated interruption); -1 = run to the end.
  int stop_after_epoch = -1;
  bool quiet = true;
};

struct TrainResult {
  std::filesystem::path final_checkpoint;
  std::filesystem::path loss_csv;
  std::vector<EpochMetrics> metrics;
  std::int64_t steps = 0;
  std::string backend_checksum_before;
  std::string backend_checksum_after;
};

// Full run: epochs x steps with checkpoints every checkpoint_interval epochs
// and at the end, loss CSV under logs/, in-run stub metrics every
// eval_interval epochs (and after epoch 1 and the last epoch).
TrainResult train(const Config& cfg, const DatasetManifest& manifest, const TrainOptions& opts);

std::filesystem::path default_cache_dir(const std::filesystem::path& out_dir);

// Pure generator forward from a checkpoint; builds no discriminator, optimizer
// or segmentation backend. role selects G (source -> colour) or G_Y.
torch::Tensor colorize(const Checkpoint& ck, const torch::Tensor& sources,
                       const std::string& role = role::kG, int batch_size = 16);

// Config stored in a checkpoint.
Config checkpoint_config(const Checkpoint& ck);

}  // namespace asl
