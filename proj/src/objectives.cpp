#include "asl/objectives.hpp"

#include <filesystem>

#include "asl/error.hpp"

namespace asl {

std::string_view to_string(Side s) {
  return s == Side::kGenerator ? "generator" : "discriminator";
}

SegCritic seg_critic(const Discriminator& d) {
  MapKind kind = d->spec().kind == DiscriminatorKind::kSegBinary ? MapKind::kBinary
                                                                 : MapKind::kMulticlass;
  if (d->spec().kind == DiscriminatorKind::kImage) {
    throw Error(ErrorCode::kKindMismatch, "image discriminator used as segmentation critic");
  }
  return {kind, [d](const SegmentationMap& m) { return d->forward(m); }};
}

TensorMap image_critic(const Discriminator& d) {
  return [d](const torch::Tensor& x) { return d->forward(x); };
}

TensorMap as_map(const Generator& g) {
  return [g](const torch::Tensor& x) { return g->forward(x); };
}

void require_finite(const torch::Tensor& t, const std::string& what) {
  if (!torch::isfinite(t.detach()).all().item<bool>()) {
    throw Error(ErrorCode::kNonFiniteLoss, what + " is not finite");
  }
}

torch::Tensor discriminator_adversarial(const torch::Tensor& real_logits,
                                        const torch::Tensor& fake_logits, GanMode mode) {
  if (mode == GanMode::kCrossEntropy) {
    return -torch::log_sigmoid(real_logits).mean() - torch::log_sigmoid(-fake_logits).mean();
  }
  return (real_logits - 1.0).pow(2).mean() + fake_logits.pow(2).mean();
}

torch::Tensor generator_adversarial(const torch::Tensor& fake_logits, GanMode mode) {
  if (mode == GanMode::kCrossEntropy) return -torch::log_sigmoid(fake_logits).mean();
  return (fake_logits - 1.0).pow(2).mean();
}

LossFragment seg_adversarial_loss(const SegCritic& d, const SegmentationMap& real_map,
                                  const SegmentationMap& fake_map, Side side, GanMode mode) {
  if (fake_map.kind != d.kind || (real_map.scores.defined() && real_map.kind != d.kind)) {
    throw Error(ErrorCode::kKindMismatch,
                std::string("critic expects ") + std::string(to_string(d.kind)) + " maps");
  }
  LossFragment out;
  if (side == Side::kDiscriminator) {
    if (!real_map.scores.defined()) {
      throw Error(ErrorCode::kMissingFragment, "discriminator side needs the real map");
    }
    auto real_logits = d.score(real_map.detach());
    auto fake_logits = d.score(fake_map.detach());
    out.value = discriminator_adversarial(real_logits, fake_logits, mode);
    out.sub_terms["d_" + std::string(to_string(d.kind))] = out.value;
  } else {
    out.value = generator_adversarial(d.score(fake_map), mode);
    out.sub_terms["adv_" + std::string(to_string(d.kind))] = out.value;
  }
  require_finite(out.value, std::string("seg adversarial (") +
                                std::string(to_string(d.kind)) + ")");
  return out;
}

LossFragment paired_baseline_loss(const TensorMap& g, const TensorMap& d,
                                  const TranslationBatch& batch, Side side,
                                  const PairedOptions& opts) {
  if (!batch.aligned) {
    throw Error(ErrorCode::kUnpairedDataInPairedMode, "batch has no alignment metadata");
  }
  return paired_baseline_loss(d, batch, g(batch.source.data()), side, opts);
}

LossFragment paired_baseline_loss(const TensorMap& d, const TranslationBatch& batch,
                                  const torch::Tensor& fake, Side side,
                                  const PairedOptions& opts) {
  if (!batch.aligned) {
    throw Error(ErrorCode::kUnpairedDataInPairedMode, "batch has no alignment metadata");
  }
  const auto& x = batch.source.data();
  const auto& y = batch.target.data();
  LossFragment out;
  if (side == Side::kDiscriminator) {
    auto real_logits = d(torch::cat({x, y}, 1));
    auto fake_logits = d(torch::cat({x, fake.detach()}, 1));
    out.value = discriminator_adversarial(real_logits, fake_logits, opts.mode);
    out.sub_terms["d_image"] = out.value;
  } else {
    auto adv = generator_adversarial(d(torch::cat({x, fake}, 1)), opts.mode);
    auto l1 = (y - fake).abs().mean();
    out.value = adv + opts.lambda_l1 * l1;
    out.sub_terms["adv"] = adv;
    out.sub_terms["l1"] = l1;
  }
  require_finite(out.value, "paired baseline loss");
  return out;
}

CycleForward cycle_forward(const TensorMap& g_x, const TensorMap& g_y, const torch::Tensor& x,
                           const torch::Tensor& y) {
  CycleForward f;
  f.fake_color = g_x(x);
  f.rec_source = g_y(f.fake_color);
  f.fake_source = g_y(y);
  f.rec_color = g_x(f.fake_source);
  return f;
}

LossFragment unpaired_baseline_loss(const TensorMap& g_x, const TensorMap& g_y,
                                    const TensorMap& d_color, const TensorMap& d_source,
                                    const TranslationBatch& batch, Side side,
                                    const UnpairedOptions& opts) {
  auto fwd = cycle_forward(g_x, g_y, batch.source.data(), batch.target.data());
  return unpaired_baseline_loss(d_color, d_source, batch, fwd, side, opts);
}

LossFragment unpaired_baseline_loss(const TensorMap& d_color, const TensorMap& d_source,
                                    const TranslationBatch& batch, const CycleForward& fwd,
                                    Side side, const UnpairedOptions& opts) {
  const auto& x = batch.source.data();
  const auto& y = batch.target.data();
  LossFragment out;
  if (side == Side::kDiscriminator) {
    auto dc = discriminator_adversarial(d_color(y), d_color(fwd.fake_color.detach()), opts.mode);
    auto ds = discriminator_adversarial(d_source(x), d_source(fwd.fake_source.detach()), opts.mode);
    out.value = dc + ds;
    out.sub_terms["d_color"] = dc;
    out.sub_terms["d_source"] = ds;
  } else {
    auto adv_xy = generator_adversarial(d_color(fwd.fake_color), opts.mode);
    auto adv_yx = generator_adversarial(d_source(fwd.fake_source), opts.mode);
    auto cyc_x = (x - fwd.rec_source).abs().mean();
    auto cyc_y = (y - fwd.rec_color).abs().mean();
    out.value = adv_xy + adv_yx + opts.lambda_cyc * (cyc_x + cyc_y);
    out.sub_terms["adv_xy"] = adv_xy;
    out.sub_terms["adv_yx"] = adv_yx;
    out.sub_terms["cycle_x"] = cyc_x;
    out.sub_terms["cycle_y"] = cyc_y;
  }
  require_finite(out.value, "unpaired baseline loss");
  return out;
}

Objective total_objective(const ObjectiveConfig& cfg, const Fragments& fragments, Side side) {
  Objective obj;
  obj.breakdown.side = side;
  auto value_of = [](const std::optional<LossFragment>& f) {
    return f ? f->value.detach().item<double>() : 0.0;
  };
  auto need = [](const std::optional<LossFragment>& f, double w, const char* name) {
    if (w != 0.0 && !f) {
      throw Error(ErrorCode::kMissingFragment,
                  std::string(name) + " has weight " + format_double(w) + " but no loss");
    }
  };
  need(fragments.g, cfg.w_g, "l_g");
  need(fragments.b, cfg.w_b, "l_b");
  need(fragments.m, cfg.w_m, "l_m");

  torch::Tensor total;
  auto add = [&](const std::optional<LossFragment>& f, double w) {
    if (w == 0.0) return;
    auto term = w * f->value;
    total = total.defined() ? total + term : term;
  };
  add(fragments.g, cfg.w_g);
  add(fragments.b, cfg.w_b);
  add(fragments.m, cfg.w_m);
  if (!total.defined()) total = torch::zeros({});
  require_finite(total, std::string(to_string(side)) + " total objective");

  auto& b = obj.breakdown;
  b.l_g = value_of(fragments.g);
  b.l_b = value_of(fragments.b);
  b.l_m = value_of(fragments.m);
  b.total = (cfg.w_g != 0 ? cfg.w_g * b.l_g : 0.0) + (cfg.w_b != 0 ? cfg.w_b * b.l_b : 0.0) +
            (cfg.w_m != 0 ? cfg.w_m * b.l_m : 0.0);
  for (const auto* f : {&fragments.g, &fragments.b, &fragments.m}) {
    if (!*f) continue;
    for (const auto& [name, t] : (*f)->sub_terms) b.sub_terms[name] = t.detach().item<double>();
  }
  obj.total = total;
  return obj;
}

LossTrace::LossTrace(const std::string& path, bool append) {
  const bool fresh = !append || !std::filesystem::exists(path) ||
                     std::filesystem::file_size(path) == 0;
  out_ = std::make_shared<std::ofstream>(path, append ? std::ios::app : std::ios::trunc);
  if (!*out_) throw Error(ErrorCode::kIoError, "cannot open loss trace " + path);
  if (fresh) *out_ << header() << '\n' << std::flush;
}

std::string LossTrace::header() { return "epoch,step,side,l_g,l_b,l_m,total,sub_terms"; }

std::string LossTrace::row(int epoch, std::int64_t step, const LossBreakdown& b) {
  std::string sub;
  for (const auto& [name, v] : b.sub_terms) {
    if (!sub.empty()) sub += ';';
    sub += name + "=" + format_double(v);
  }
  return std::to_string(epoch) + "," + std::to_string(step) + "," +
         std::string(to_string(b.side)) + "," + format_double(b.l_g) + "," +
         format_double(b.l_b) + "," + format_double(b.l_m) + "," + format_double(b.total) +
         "," + sub;
}

void LossTrace::write(int epoch, std::int64_t step, const LossBreakdown& b) {
  if (!out_) return;
  *out_ << row(epoch, step, b) << '\n' << std::flush;
}

}  // namespace asl
