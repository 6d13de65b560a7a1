#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "asl/error.hpp"

namespace asl {

enum class Variant { kMulticlass, kBinary, kCombined, kBaseline };
enum class Baseline { kPaired, kUnpaired };
enum class Task { kSketch2Photo, kLabel2Photo };
enum class GanMode { kCrossEntropy, kLeastSquares };
enum class OptimizerKind { kAdam };
enum class GeneratorArch { kResnetBlocks, kUnet };
enum class EdgeMethod { kPretrainedHed, kXdog, kGradientFallback };
enum class BackendKind { kStub, kPretrained };

std::string_view to_string(Variant v);
std::string_view to_string(Baseline b);
std::string_view to_string(Task t);
std::string_view to_string(GanMode m);
std::string_view to_string(GeneratorArch a);
std::string_view to_string(EdgeMethod m);
std::string_view to_string(BackendKind k);

Variant parse_variant(std::string_view s);
Baseline parse_baseline(std::string_view s);
Task parse_task(std::string_view s);

struct ObjectiveConfig {
  Variant variant = Variant::kCombined;
  Baseline baseline = Baseline::kUnpaired;
  double w_g = 1.0;
  double w_b = 1.0;
  double w_m = 1.0;
  // Baseline reconstruction weights (Pix2Pix L1, CycleGAN cycle).
  double lambda_l1 = 100.0;
  double lambda_cyc = 10.0;
  // Unset means the baseline's own convention.
  std::optional<GanMode> gan_mode;

  bool uses_binary() const {
    return variant == Variant::kBinary || variant == Variant::kCombined;
  }
  bool uses_multiclass() const {
    return variant == Variant::kMulticlass || variant == Variant::kCombined;
  }
  GanMode resolved_gan_mode() const {
    if (gan_mode) return *gan_mode;
    return baseline == Baseline::kPaired ? GanMode::kCrossEntropy
                                         : GanMode::kLeastSquares;
  }

  // Canonical weights: 1.0 for the terms a variant activates, 0 otherwise.
  static ObjectiveConfig for_variant(Variant v, Baseline b);
};

struct RunConfig {
  int resolution = 256;
  int epochs = 200;
  double learning_rate = 0.0002;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  double beta1 = 0.5;
  double beta2 = 0.999;
  std::uint64_t seed = 0;
  Task task = Task::kSketch2Photo;
  int batch_size = 1;
  bool lr_decay = false;
  int checkpoint_interval = 0;  // epochs; 0 = final checkpoint only
  int eval_interval = 0;        // epochs; 0 = no in-training evaluation
  int prefetch = 2;
};

struct DataConfig {
  std::string dataset_dir;
  std::string dataset_name = "dataset";
  EdgeMethod edge_method = EdgeMethod::kGradientFallback;
  double edge_sigma = 1.0;
  bool edge_binarize = false;
  double edge_threshold = 0.2;
  std::string hed_prototxt;
  std::string hed_weights;
  double train_ratio = 0.9;
  std::string split_preset;  // Table-style fixed split counts, e.g. "sheep"
};

struct NetworkConfig {
  GeneratorArch generator_arch = GeneratorArch::kResnetBlocks;
  int generator_width = 64;
  int generator_blocks = 9;
  int unet_depth = 8;
  int disc_width = 64;
  int disc_layers = 3;
  BackendKind seg_backend = BackendKind::kStub;
  std::string seg_weights;
  int seg_classes = 5;
  std::vector<int> seg_foreground = {3, 4};
  double seg_temperature = 0.05;
  BackendKind extractor = BackendKind::kStub;
  std::string extractor_weights;
  int extractor_dim = 32;
};

struct Config {
  RunConfig run;
  ObjectiveConfig objective;
  DataConfig data;
  NetworkConfig networks;
  // Keys ("section.key") given explicitly by a file or flag.
  std::set<std::string> explicit_keys;

  // Flat key/value INI text with [run], [objective], [data], [networks].
  std::string serialize() const;
  static Config parse(std::string_view text);
  static Config load(const std::string& path);
  void save(const std::string& path) const;

  // Sets "key" or "section.key" from its textual value; unknown keys and
  // malformed values raise ConfigInvalid.
  void set(std::string_view key, std::string_view value);
  std::string get(std::string_view key) const;
  static std::vector<std::string> keys();  // "section.key", serialization order
};

struct ConfigIssue {
  ErrorCode code;
  std::string message;
};

struct ValidationResult {
  std::optional<Config> config;
  std::vector<ConfigIssue> issues;
  bool ok() const { return config.has_value(); }
};

// Resolves implicit weights to the variant's canonical values, then checks
// every invariant. Reports all violations, not just the first.
ValidationResult validate_config(Config cfg);

// Throws the first issue's code with every message joined.
Config validated_or_throw(Config cfg);

std::string format_double(double v);

}  // namespace asl
