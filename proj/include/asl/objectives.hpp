#pragma once

#include <fstream>
#include <functional>
#include <memory>
#include <map>
#include <optional>
#include <string>

#include <torch/torch.h>

#include "asl/config.hpp"
#include "asl/networks.hpp"
#include "asl/types.hpp"

namespace asl {

enum class Side { kGenerator, kDiscriminator };

std::string_view to_string(Side s);

// Any differentiable image map (generator or stub).
using TensorMap = std::function<torch::Tensor(const torch::Tensor&)>;

// A segmentation discriminator seen as its declared kind plus a logit map.
struct SegCritic {
  MapKind kind;
  std::function<torch::Tensor(const SegmentationMap&)> score;
};

SegCritic seg_critic(const Discriminator& d);
TensorMap image_critic(const Discriminator& d);
TensorMap as_map(const Generator& g);

// A differentiable loss value and its named parts.
struct LossFragment {
  torch::Tensor value;
  std::map<std::string, torch::Tensor> sub_terms;
};

struct LossBreakdown {
  double l_g = 0.0;
  double l_b = 0.0;
  double l_m = 0.0;
  double total = 0.0;
  Side side = Side::kGenerator;
  std::map<std::string, double> sub_terms;
};

struct Fragments {
  std::optional<LossFragment> g;
  std::optional<LossFragment> b;
  std::optional<LossFragment> m;
};

struct Objective {
  LossBreakdown breakdown;
  torch::Tensor total;  // differentiable; what the optimizer steps on
};

// Mean-form adversarial terms on raw logits.
// Discriminator: -mean log D(real) - mean log(1 - D(fake))   (ce)
//                mean (D(real) - 1)^2 + mean D(fake)^2        (lsgan)
// Generator:     -mean log D(fake)                            (ce, non-saturating)
//                mean (D(fake) - 1)^2                         (lsgan)
torch::Tensor discriminator_adversarial(const torch::Tensor& real_logits,
                                        const torch::Tensor& fake_logits, GanMode mode);
torch::Tensor generator_adversarial(const torch::Tensor& fake_logits, GanMode mode);

// L_B / L_M. The discriminator side scores a detached fake map; the generator
// side ignores real_map (which may be undefined) and keeps the fake map's graph.
LossFragment seg_adversarial_loss(const SegCritic& d, const SegmentationMap& real_map,
                                  const SegmentationMap& fake_map, Side side, GanMode mode);

struct PairedOptions {
  double lambda_l1 = 100.0;
  GanMode mode = GanMode::kCrossEntropy;
};

// Pix2Pix L_G with a source-conditioned discriminator.
LossFragment paired_baseline_loss(const TensorMap& g, const TensorMap& d,
                                  const TranslationBatch& batch, Side side,
                                  const PairedOptions& opts);
// Same, given an already computed fake = G(x).
LossFragment paired_baseline_loss(const TensorMap& d, const TranslationBatch& batch,
                                  const torch::Tensor& fake, Side side,
                                  const PairedOptions& opts);

struct UnpairedOptions {
  double lambda_cyc = 10.0;
  GanMode mode = GanMode::kLeastSquares;
};

// Generator outputs of one CycleGAN step.
struct CycleForward {
  torch::Tensor fake_color;   // G_X(x)
  torch::Tensor rec_source;   // G_Y(G_X(x))
  torch::Tensor fake_source;  // G_Y(y)
  torch::Tensor rec_color;    // G_X(G_Y(y))
};

CycleForward cycle_forward(const TensorMap& g_x, const TensorMap& g_y,
                           const torch::Tensor& x, const torch::Tensor& y);

// CycleGAN L_G summed over both directions. d_color judges colour images,
// d_source judges source-domain images.
LossFragment unpaired_baseline_loss(const TensorMap& g_x, const TensorMap& g_y,
                                    const TensorMap& d_color, const TensorMap& d_source,
                                    const TranslationBatch& batch, Side side,
                                    const UnpairedOptions& opts);
LossFragment unpaired_baseline_loss(const TensorMap& d_color, const TensorMap& d_source,
                                    const TranslationBatch& batch, const CycleForward& fwd,
                                    Side side, const UnpairedOptions& opts);

// total = w_g l_g + w_b l_b + w_m l_m; zero-weight terms are skipped even when
// present. A nonzero weight without its fragment raises MissingFragment.
Objective total_objective(const ObjectiveConfig& cfg, const Fragments& fragments, Side side);

// Throws NonFiniteLoss naming `what` if the tensor holds NaN/Inf.
void require_finite(const torch::Tensor& t, const std::string& what);

// Per-step loss CSV: epoch,step,side,l_g,l_b,l_m,total,sub_terms
class LossTrace {
 public:
  LossTrace() = default;
  // Truncates unless `append`; writes the header when the file is new/empty.
  LossTrace(const std::string& path, bool append);
  void write(int epoch, std::int64_t step, const LossBreakdown& b);
  static std::string header();
  static std::string row(int epoch, std::int64_t step, const LossBreakdown& b);

 private:
  std::shared_ptr<std::ofstream> out_;
};

}  // namespace asl
