#include "asl/training.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>

#include "asl/error.hpp"
#include "asl/evaluation.hpp"

namespace asl {

namespace fs = std::filesystem;

std::vector<std::pair<std::string, torch::nn::Module*>> NetworkSet::roles() const {
  std::vector<std::pair<std::string, torch::nn::Module*>> out;
  if (g) out.emplace_back(role::kG, g.get());
  if (g_y) out.emplace_back(role::kGY, g_y.get());
  if (d) out.emplace_back(role::kD, d.get());
  if (d_x) out.emplace_back(role::kDX, d_x.get());
  if (d_b) out.emplace_back(role::kDB, d_b.get());
  if (d_m) out.emplace_back(role::kDM, d_m.get());
  return out;
}

int source_channels(Task task) { return task == Task::kSketch2Photo ? 1 : 3; }

GeneratorSpec generator_spec(const Config& cfg, int in_channels, int out_channels) {
  GeneratorSpec s;
  s.arch = cfg.networks.generator_arch;
  s.in_channels = in_channels;
  s.out_channels = out_channels;
  s.base_width = cfg.networks.generator_width;
  s.n_blocks = cfg.networks.generator_blocks;
  s.depth = cfg.networks.unet_depth;
  return s;
}

NetworkSet build_networks(const Config& cfg, const SeedState& seeds) {
  const int src = source_channels(cfg.run.task);
  const bool paired = cfg.objective.baseline == Baseline::kPaired;
  auto disc = [&](DiscriminatorKind kind, int in) {
    DiscriminatorSpec s;
    s.kind = kind;
    s.in_channels = in;
    s.base_width = cfg.networks.disc_width;
    s.n_layers = cfg.networks.disc_layers;
    return s;
  };
  if (patch_output_size(cfg.run.resolution, cfg.networks.disc_layers) < 1) {
    throw Error(ErrorCode::kConfigInvalid, "resolution too small for disc_layers");
  }
  NetworkSet n;
  n.g = build_generator(generator_spec(cfg, src, 3), seeds.init_seed(role::kG));
  if (paired) {
    n.d = build_discriminator(disc(DiscriminatorKind::kImage, src + 3), seeds.init_seed(role::kD));
  } else {
    n.g_y = build_generator(generator_spec(cfg, 3, src), seeds.init_seed(role::kGY));
    n.d = build_discriminator(disc(DiscriminatorKind::kImage, 3), seeds.init_seed(role::kD));
    n.d_x = build_discriminator(disc(DiscriminatorKind::kImage, src), seeds.init_seed(role::kDX));
  }
  if (cfg.objective.uses_binary()) {
    n.d_b = build_discriminator(disc(DiscriminatorKind::kSegBinary, 2), seeds.init_seed(role::kDB));
  }
  if (cfg.objective.uses_multiclass()) {
    n.d_m = build_discriminator(disc(DiscriminatorKind::kSegMulticlass, cfg.networks.seg_classes),
                                seeds.init_seed(role::kDM));
  }
  return n;
}

Trainer::Trainer(Config cfg, SegBackend* backend, fs::path cache_dir)
    : cfg_(std::move(cfg)), backend_(backend), seeds_(seed_all(cfg_.run.seed)) {
  nets_ = build_networks(cfg_, seeds_);
  const bool asl = cfg_.objective.uses_binary() || cfg_.objective.uses_multiclass();
  if (asl) {
    if (backend_ == nullptr) throw Error(ErrorCode::kBackendNotLoaded, "ASL variant without backend");
    if (backend_->class_count() != cfg_.networks.seg_classes) {
      throw Error(ErrorCode::kChannelMismatch, "backend class count differs from seg_classes");
    }
    cache_ = std::make_unique<SegCache>(std::move(cache_dir), *backend_);
  }
  const bool paired = cfg_.objective.baseline == Baseline::kPaired;
  if (paired) {
    add_optimizer("G", {role::kG});
    add_optimizer("D", {role::kD});
  } else {
    add_optimizer("G", {role::kG, role::kGY});
    add_optimizer("D", {role::kD, role::kDX});
  }
  if (nets_.d_b) add_optimizer("D_B", {role::kDB});
  if (nets_.d_m) add_optimizer("D_M", {role::kDM});
}

void Trainer::add_optimizer(const std::string& name, const std::vector<std::string>& roles) {
  std::vector<torch::Tensor> params;
  for (const auto& [r, module] : nets_.roles()) {
    if (std::find(roles.begin(), roles.end(), r) == roles.end()) continue;
    for (const auto& p : module->parameters()) params.push_back(p);
  }
  auto opts = torch::optim::AdamOptions(cfg_.run.learning_rate)
                  .betas({cfg_.run.beta1, cfg_.run.beta2});
  optimizers_[name] = std::make_unique<torch::optim::Adam>(params, opts);
  optimizer_roles_[name] = roles;
}

std::map<std::string, std::vector<std::string>> Trainer::optimizer_roles() const {
  return optimizer_roles_;
}

void Trainer::set_epoch_learning_rate(int epoch) {
  double lr = cfg_.run.learning_rate;
  if (cfg_.run.lr_decay && cfg_.run.epochs > 1) {
    const int constant = cfg_.run.epochs / 2;
    const int decay = cfg_.run.epochs - constant;
    lr *= 1.0 - std::max(0, epoch + 1 - constant) / static_cast<double>(decay + 1);
  }
  for (auto& [name, opt] : optimizers_) {
    for (auto& group : opt->param_groups()) {
      static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
    }
  }
}

double Trainer::learning_rate() const {
  const auto& group = optimizers_.at("G")->param_groups().front();
  return static_cast<const torch::optim::AdamOptions&>(group.options()).lr();
}

StepResult Trainer::train_step(const TranslationBatch& batch) {
  const ObjectiveConfig& obj = cfg_.objective;
  const GanMode mode = obj.resolved_gan_mode();
  const bool paired = obj.baseline == Baseline::kPaired;
  const bool asl = obj.uses_binary() || obj.uses_multiclass();
  for (auto& [name, module] : nets_.roles()) module->train();

  // (1) generator forward
  CycleForward cyc;
  torch::Tensor fake;
  if (paired) {
    fake = nets_.g->forward(batch.source.data());
  } else {
    cyc = cycle_forward(as_map(nets_.g), as_map(nets_.g_y), batch.source.data(),
                        batch.target.data());
    fake = cyc.fake_color;
  }

  // (2) segmentation maps
  SegmentationMap real_multi, real_binary, fake_multi, fake_binary;
  if (asl) {
    auto cached = cache_->segment_cached(batch.target);
    real_multi = cached.multiclass;
    real_binary = cached.binary;
    fake_multi = backend_->segment_multiclass(ImageBatch(fake, Domain::kColor));
    fake_binary = collapse_to_binary(fake_multi, backend_->foreground_ids());
  }

  // (3) discriminators
  StepResult result;
  Fragments d_frag;
  {
    auto& opt = optimizer("D");
    opt.zero_grad();
    if (paired) {
      d_frag.g = paired_baseline_loss(image_critic(nets_.d), batch, fake, Side::kDiscriminator,
                                      {obj.lambda_l1, mode});
    } else {
      d_frag.g = unpaired_baseline_loss(image_critic(nets_.d), image_critic(nets_.d_x), batch, cyc,
                                        Side::kDiscriminator, {obj.lambda_cyc, mode});
    }
    d_frag.g->value.backward();
    opt.step();
  }
  if (nets_.d_b) {
    auto& opt = optimizer("D_B");
    opt.zero_grad();
    d_frag.b = seg_adversarial_loss(seg_critic(nets_.d_b), real_binary, fake_binary,
                                    Side::kDiscriminator, mode);
    d_frag.b->value.backward();
    opt.step();
  }
  if (nets_.d_m) {
    auto& opt = optimizer("D_M");
    opt.zero_grad();
    d_frag.m = seg_adversarial_loss(seg_critic(nets_.d_m), real_multi, fake_multi,
                                    Side::kDiscriminator, mode);
    d_frag.m->value.backward();
    opt.step();
  }
  result.discriminator = total_objective(obj, d_frag, Side::kDiscriminator).breakdown;

  // (4) generator(s)
  Fragments g_frag;
  if (paired) {
    g_frag.g = paired_baseline_loss(image_critic(nets_.d), batch, fake, Side::kGenerator,
                                    {obj.lambda_l1, mode});
  } else {
    g_frag.g = unpaired_baseline_loss(image_critic(nets_.d), image_critic(nets_.d_x), batch, cyc,
                                      Side::kGenerator, {obj.lambda_cyc, mode});
  }
  if (nets_.d_b) {
    g_frag.b = seg_adversarial_loss(seg_critic(nets_.d_b), real_binary, fake_binary,
                                    Side::kGenerator, mode);
  }
  if (nets_.d_m) {
    g_frag.m = seg_adversarial_loss(seg_critic(nets_.d_m), real_multi, fake_multi,
                                    Side::kGenerator, mode);
  }
  auto g_obj = total_objective(obj, g_frag, Side::kGenerator);
  auto& g_opt = optimizer("G");
  g_opt.zero_grad();
  g_obj.total.backward();
  g_opt.step();
  result.generator = g_obj.breakdown;
  ++global_step_;
  return result;
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint ck;
  ck.config_text = cfg_.serialize();
  ck.epoch = epoch_;
  ck.global_step = global_step_;
  ck.rng_state = seeds_.serialize();
  for (const auto& [r, module] : nets_.roles()) ck.put_module(r, *module);
  for (const auto& [name, opt] : optimizers_) {
    std::int64_t index = 0;
    for (const auto& group : opt->param_groups()) {
      for (const auto& p : group.params()) {
        const std::string prefix = "opt/" + name + "/" + std::to_string(index++) + "/";
        auto it = opt->state().find(p.unsafeGetTensorImpl());
        if (it == opt->state().end()) continue;
        const auto& st = static_cast<const torch::optim::AdamParamState&>(*it->second);
        ck.tensors[prefix + "step"] = torch::tensor(st.step(), torch::kInt64);
        ck.tensors[prefix + "exp_avg"] = st.exp_avg().detach().clone();
        ck.tensors[prefix + "exp_avg_sq"] = st.exp_avg_sq().detach().clone();
      }
    }
  }
  return ck;
}

void Trainer::restore(const Checkpoint& ck) {
  for (const auto& [r, module] : nets_.roles()) ck.load_module(r, *module);
  for (auto& [name, opt] : optimizers_) {
    opt->state().clear();
    std::int64_t index = 0;
    for (auto& group : opt->param_groups()) {
      for (auto& p : group.params()) {
        const std::string prefix = "opt/" + name + "/" + std::to_string(index++) + "/";
        auto step = ck.tensors.find(prefix + "step");
        if (step == ck.tensors.end()) continue;
        auto st = std::make_unique<torch::optim::AdamParamState>();
        st->step(step->second.item<std::int64_t>());
        st->exp_avg(ck.tensors.at(prefix + "exp_avg").clone());
        st->exp_avg_sq(ck.tensors.at(prefix + "exp_avg_sq").clone());
        opt->state()[p.unsafeGetTensorImpl()] = std::move(st);
      }
    }
  }
  seeds_.restore(ck.rng_state);
  epoch_ = ck.epoch;
  global_step_ = ck.global_step;
}

fs::path default_cache_dir(const fs::path& out_dir) {
  if (const char* env = std::getenv("ASL_CACHE_DIR"); env != nullptr && *env != '\0') {
    return fs::path(env) / "segcache";
  }
  return out_dir / "cache" / "segcache";
}

Config checkpoint_config(const Checkpoint& ck) { return validated_or_throw(Config::parse(ck.config_text)); }

torch::Tensor colorize(const Checkpoint& ck, const torch::Tensor& sources, const std::string& r,
                       int batch_size) {
  if (!ck.has_role(r)) throw Error(ErrorCode::kMissingGeneratorRole, "checkpoint has no " + r);
  const Config cfg = checkpoint_config(ck);
  const int src = source_channels(cfg.run.task);
  const bool forward_dir = r == role::kG;
  auto g = build_generator(generator_spec(cfg, forward_dir ? src : 3, forward_dir ? 3 : src), 0);
  ck.load_module(r, *g);
  g->eval();
  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> out;
  for (int64_t i = 0; i < sources.size(0); i += batch_size) {
    out.push_back(g->forward(sources.slice(0, i, std::min<int64_t>(i + batch_size, sources.size(0)))));
  }
  return torch::cat(out, 0);
}

namespace {

std::string checkpoint_name(int epoch) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "epoch_%04d.ckpt", epoch);
  return buf;
}

torch::Tensor stack_sources(const ImageDataset& data) {
  std::vector<torch::Tensor> xs;
  for (std::size_t i = 0; i < data.source_size(); ++i) xs.push_back(data.source(i));
  return torch::stack(xs);
}

}  // namespace

TrainResult train(const Config& cfg_in, const DatasetManifest& manifest, const TrainOptions& opts) {
  Config cfg = validated_or_throw(cfg_in);
  if (manifest.resolution != cfg.run.resolution) {
    throw Error(ErrorCode::kResolutionMismatch, "manifest resolution " +
                                                    std::to_string(manifest.resolution) +
                                                    " != run resolution " +
                                                    std::to_string(cfg.run.resolution));
  }
  if (manifest.task != cfg.run.task) {
    throw Error(ErrorCode::kLayoutModeMismatch, "manifest task differs from run task");
  }
  fs::create_directories(opts.out_dir / "checkpoints");
  fs::create_directories(opts.out_dir / "logs");
  const fs::path cache_dir = opts.cache_dir.empty() ? default_cache_dir(opts.out_dir) : opts.cache_dir;

  const bool asl = cfg.objective.uses_binary() || cfg.objective.uses_multiclass();
  std::unique_ptr<SegBackend> backend;
  if (asl) backend = make_seg_backend(cfg.networks);

  Trainer trainer(cfg, backend.get(), cache_dir);
  bool resumed = false;
  if (opts.resume) {
    trainer.restore(Checkpoint::load(opts.resume->string()));
    resumed = true;
  }

  TrainResult result;
  if (backend) result.backend_checksum_before = backend->parameter_checksum();
  result.loss_csv = opts.out_dir / "logs" / "losses.csv";
  LossTrace trace(result.loss_csv.string(), resumed);

  ImageDataset train_set(manifest, "train");
  const SampleMode mode =
      cfg.objective.baseline == Baseline::kPaired ? SampleMode::kPaired : SampleMode::kUnpaired;
  BatchSampler sampler(train_set, cfg.run.batch_size, mode);

  std::optional<ImageDataset> test_set;
  std::unique_ptr<FeatureExtractor> extractor;
  std::unique_ptr<SegBackend> eval_segmenter;
  FidCache fid_cache;
  std::ofstream metrics_csv;
  if (cfg.run.eval_interval > 0) {
    test_set.emplace(manifest, "test");
    extractor = make_feature_extractor(cfg.networks);
    if (test_set->has_masks()) eval_segmenter = make_seg_backend(cfg.networks);
    const fs::path mpath = opts.out_dir / "logs" / "metrics.csv";
    const bool fresh = !resumed || !fs::exists(mpath);
    metrics_csv.open(mpath, resumed ? std::ios::app : std::ios::trunc);
    if (fresh) metrics_csv << "epoch,fid,miou\n";
  }

  fs::path last_good = opts.resume ? *opts.resume : fs::path();
  auto save = [&](const fs::path& path) {
    trainer.checkpoint().save(path.string());
    last_good = path;
  };

  for (int epoch = trainer.epoch(); epoch < cfg.run.epochs; ++epoch) {
    if (opts.stop_after_epoch >= 0 && epoch >= opts.stop_after_epoch) break;
    trainer.set_epoch_learning_rate(epoch);
    EpochLoader loader(sampler, sampler.plan_epoch(trainer.seeds().shuffle()), cfg.run.prefetch);
    std::int64_t step_in_epoch = 0;
    while (auto batch = loader.next()) {
      StepResult r;
      try {
        r = trainer.train_step(*batch);
      } catch (const Error& e) {
        if (e.code() == ErrorCode::kNonFiniteLoss) {
          throw Error(ErrorCode::kNonFiniteLoss,
                      std::string(e.what()) + " at step " + std::to_string(trainer.global_step()) +
                          "; last good checkpoint: " +
                          (last_good.empty() ? "<none>" : last_good.string()));
        }
        throw;
      }
      trace.write(epoch + 1, trainer.global_step(), r.discriminator);
      trace.write(epoch + 1, trainer.global_step(), r.generator);
      ++step_in_epoch;
      ++result.steps;
    }
    trainer.set_epoch(epoch + 1);
    const int done = epoch + 1;
    if (!opts.quiet) {
      std::cerr << "epoch " << done << "/" << cfg.run.epochs << " steps " << trainer.global_step()
                << "\n";
    }
    if (cfg.run.eval_interval > 0 &&
        (done == 1 || done % cfg.run.eval_interval == 0 || done == cfg.run.epochs)) {
      EpochMetrics m;
      m.epoch = done;
      auto fake = colorize(trainer.checkpoint(), stack_sources(*test_set));
      auto report = evaluate_outputs(fake, *test_set, MetricSelection{true, eval_segmenter != nullptr},
                                     *extractor, eval_segmenter.get(), &fid_cache);
      m.fid = report.fid;
      m.miou = report.miou;
      result.metrics.push_back(m);
      metrics_csv << done << "," << (m.fid ? format_double(*m.fid) : "") << ","
                  << (m.miou ? format_double(*m.miou) : "") << "\n"
                  << std::flush;
    }
    if (cfg.run.checkpoint_interval > 0 && done % cfg.run.checkpoint_interval == 0 &&
        done != cfg.run.epochs) {
      save(opts.out_dir / "checkpoints" / checkpoint_name(done));
    }
  }
  result.final_checkpoint = opts.out_dir / "checkpoints" / checkpoint_name(trainer.epoch());
  save(result.final_checkpoint);
  if (trainer.epoch() == cfg.run.epochs) {
    fs::copy_file(result.final_checkpoint, opts.out_dir / "checkpoints" / "final.ckpt",
                  fs::copy_options::overwrite_existing);
    result.final_checkpoint = opts.out_dir / "checkpoints" / "final.ckpt";
  }
  if (backend) result.backend_checksum_after = backend->parameter_checksum();
  return result;
}

}  // namespace asl
