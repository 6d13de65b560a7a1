#include "cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "asl/config.hpp"
#include "asl/datapipe.hpp"
#include "asl/error.hpp"
#include "asl/evaluation.hpp"
#include "asl/networks.hpp"
#include "asl/segbackend.hpp"
#include "asl/training.hpp"

namespace asl::cli {

namespace fs = std::filesystem;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

// Short flags from the documented interface that differ from the key name.
const std::map<std::string, std::string> kAliases = {
    {"wb", "objective.w_b"},
    {"wm", "objective.w_m"},
    {"lr", "run.learning_rate"},
    {"dataset-dir", "data.dataset_dir"},
    {"segbackend", "networks.seg_backend"},
};

struct Common {
  std::string config_path;
  std::string out_dir;
  std::vector<std::pair<std::string, std::string>> overrides;
  std::map<std::string, std::string> values;  // flag storage, key -> text
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config_path, "config file (INI)");
  sub->add_option("--out", c.out_dir, "output directory")->required();
  for (const auto& full : Config::keys()) {
    const std::string key = full.substr(full.find('.') + 1);
    std::string names = "--" + key;
    std::string dashed = key;
    std::replace(dashed.begin(), dashed.end(), '_', '-');
    if (dashed != key) names += ",--" + dashed;
    for (const auto& [alias, target] : kAliases) {
      if (target == full) names += ",--" + alias;
    }
    sub->add_option(names, c.values[full], "override " + full);
  }
}

void collect_overrides(CLI::App* sub, Common& c) {
  for (const auto& full : Config::keys()) {
    const std::string key = full.substr(full.find('.') + 1);
    if (sub->get_option("--" + key)->count() > 0) c.overrides.emplace_back(full, c.values[full]);
  }
}

// flags > file > defaults
Config resolve_config(const Common& c) {
  Config cfg = c.config_path.empty() ? Config{} : Config::load(c.config_path);
  for (const auto& [key, value] : c.overrides) cfg.set(key, value);
  return cfg;
}

void write_snapshot(const fs::path& out, const Config& cfg) {
  fs::create_directories(out);
  cfg.save((out / "config.ini").string());
}

DatasetManifest load_dataset(const Config& cfg) {
  const fs::path dir = cfg.data.dataset_dir;
  if (dir.empty()) throw Error(ErrorCode::kConfigInvalid, "data.dataset_dir is not set");
  if (fs::exists(dir / kManifestFile)) {
    auto m = DatasetManifest::load(dir / kManifestFile);
    m.source_dir = dir.string();
    m.verify();
    return m;
  }
  if (!fs::exists(dir)) throw Error(ErrorCode::kIoError, "dataset not found: " + dir.string());
  const bool paired = fs::exists(dir / "trainA") && fs::exists(dir / "trainB");
  auto m = DatasetManifest::scan(dir, cfg.data.dataset_name, cfg.run.task,
                                 paired ? Layout::kPairedAB : Layout::kUnpairedAB,
                                 cfg.run.resolution);
  m.verify();
  return m;
}

std::vector<double> parse_grid(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw Error(ErrorCode::kConfigInvalid, "bad grid value '" + item + "'");
    }
  }
  if (out.empty()) throw Error(ErrorCode::kConfigInvalid, "empty weight grid");
  return out;
}

std::string grid_label(double w) {
  std::string s = format_double(w);
  std::replace(s.begin(), s.end(), '.', 'p');
  return "w_" + s;
}

int cmd_synth(const Common& c, int n_train, int n_test) {
  Config cfg = validated_or_throw(resolve_config(c));
  const fs::path out = c.out_dir;
  // small synthetic scenes unless a resolution is asked for
  if (!cfg.explicit_keys.count("run.resolution")) cfg.run.resolution = 64;
  cfg.data.dataset_dir = out.string();
  cfg.data.dataset_name = "synthetic";
  write_snapshot(out, cfg);
  SynthOptions o;
  o.train = n_train;
  o.test = n_test;
  o.resolution = cfg.run.resolution;
  o.seed = cfg.run.seed;
  o.task = cfg.run.task;
  o.edges = EdgeExtractorSpec::from_config(cfg);
  auto m = synthesize_dataset(out, o);
  return m.count("trainB") > 0 ? 0 : kExitFailure;
}

int cmd_prepare(const Common& c, const std::string& source, const std::string& annotations,
                const std::string& images, const std::string& category) {
  Config cfg = validated_or_throw(resolve_config(c));
  const fs::path out = c.out_dir;
  write_snapshot(out, cfg);
  const auto edges = EdgeExtractorSpec::from_config(cfg);
  if (!annotations.empty()) {
    CurateOptions o;
    o.seed = cfg.run.seed;
    o.train_ratio = cfg.data.train_ratio;
    o.split_preset = cfg.data.split_preset;
    o.resolution = cfg.run.resolution;
    o.edges = edges;
    curate_by_category(annotations, images, category, out, o);
    return 0;
  }
  if (source.empty()) {
    throw Error(ErrorCode::kConfigInvalid, "prepare-data needs --source or --annotations");
  }
  // Photos are copied so the edge maps land only under --out.
  for (const char* split : {"trainB", "testB"}) {
    const fs::path from = fs::path(source) / split;
    if (!fs::exists(from)) throw Error(ErrorCode::kIoError, "missing " + from.string());
    if (fs::equivalent(fs::path(source), out)) continue;
    fs::create_directories(out / split);
    for (const auto& e : fs::directory_iterator(from)) {
      if (e.is_regular_file()) {
        fs::copy_file(e.path(), out / split / e.path().filename(),
                      fs::copy_options::overwrite_existing);
      }
    }
  }
  prepare_sketches(out, cfg.data.dataset_name, edges, cfg.run.resolution);
  return 0;
}

int cmd_train(const Common& c, const std::string& resume, int stop_after, std::ostream& out) {
  Config cfg = validated_or_throw(resolve_config(c));
  const fs::path dir = c.out_dir;
  write_snapshot(dir, cfg);
  auto manifest = load_dataset(cfg);
  TrainOptions o;
  o.out_dir = dir;
  if (!resume.empty()) o.resume = fs::path(resume);
  o.stop_after_epoch = stop_after;
  o.quiet = false;
  auto r = train(cfg, manifest, o);
  out << "steps " << r.steps << "\n";
  if (!r.final_checkpoint.empty()) out << "checkpoint " << r.final_checkpoint.string() << "\n";
  out << "losses " << r.loss_csv.string() << "\n";
  return 0;
}

int cmd_colorize(const Common& c, std::string checkpoint, const std::string& input,
                 const std::string& role_name, std::ostream& out) {
  Config cfg = validated_or_throw(resolve_config(c));
  const fs::path dir = c.out_dir;
  write_snapshot(dir, cfg);
  if (checkpoint.empty()) checkpoint = (dir / "checkpoints" / "final.ckpt").string();
  const Checkpoint ck = Checkpoint::load(checkpoint);
  const Config run_cfg = checkpoint_config(ck);
  const int channels = role_name == role::kG ? source_channels(run_cfg.run.task) : 3;
  const fs::path in = input.empty() ? fs::path(run_cfg.data.dataset_dir) / "testA" : fs::path(input);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(in)) {
    const auto ext = e.path().extension().string();
    if (e.is_regular_file() && (ext == ".png" || ext == ".jpg" || ext == ".jpeg")) {
      files.push_back(e.path());
    }
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw Error(ErrorCode::kEmptyResult, "no images in " + in.string());
  std::vector<torch::Tensor> xs;
  for (const auto& f : files) {
    xs.push_back(to_tensor(resize_square(read_image(f, channels), run_cfg.run.resolution)));
  }
  auto y = colorize(ck, torch::stack(xs), role_name);
  fs::create_directories(dir / "images");
  for (std::size_t i = 0; i < files.size(); ++i) {
    write_rgb(dir / "images" / (files[i].stem().string() + ".png"), to_image(y[i]));
  }
  out << "wrote " << files.size() << " images\n";
  return 0;
}

int cmd_evaluate(const Common& c, std::string checkpoint, const std::string& metrics_text,
                 std::ostream& out) {
  Config cfg = validated_or_throw(resolve_config(c));
  const fs::path dir = c.out_dir;
  write_snapshot(dir, cfg);
  if (checkpoint.empty()) checkpoint = (dir / "checkpoints" / "final.ckpt").string();
  const Checkpoint ck = Checkpoint::load(checkpoint);
  if (!ck.has_role(role::kG)) {
    throw Error(ErrorCode::kMissingGeneratorRole, checkpoint + " holds no generator");
  }
  Config run_cfg = checkpoint_config(ck);
  if (cfg.explicit_keys.count("data.dataset_dir")) run_cfg.data.dataset_dir = cfg.data.dataset_dir;
  const auto manifest = load_dataset(run_cfg);

  MetricSelection sel{false, false};
  std::stringstream ss(metrics_text);
  std::string m;
  while (std::getline(ss, m, ',')) {
    if (m == "fid") sel.fid = true;
    else if (m == "miou") sel.miou = true;
    else throw Error(ErrorCode::kConfigInvalid, "unknown metric '" + m + "'");
  }
  auto extractor = make_feature_extractor(cfg.networks);
  std::unique_ptr<SegBackend> segmenter;
  if (sel.miou) segmenter = make_seg_backend(cfg.networks);

  ImageDataset test(manifest, "test");
  std::vector<torch::Tensor> xs;
  for (std::size_t i = 0; i < test.source_size(); ++i) xs.push_back(test.source(i));
  auto generated = colorize(ck, torch::stack(xs));
  MetricReport r = evaluate_outputs(generated, test, sel, *extractor, segmenter.get());
  r.dataset = manifest.name;
  r.task = std::string(to_string(run_cfg.run.task));
  r.baseline = std::string(to_string(run_cfg.objective.baseline));
  r.variant = std::string(to_string(run_cfg.objective.variant));

  fs::create_directories(dir / "reports");
  write_report(dir / "reports" / "metrics.csv", {r});
  const std::size_t n_grid = std::min<std::size_t>(4, test.source_size());
  for (std::size_t i = 0; i < n_grid; ++i) {
    write_comparison_grid(dir / "reports" / ("grid_" + test.source_stems()[i] + ".png"),
                          test.source(i), test.target(std::min(i, test.target_size() - 1)),
                          {generated[static_cast<int64_t>(i)]});
  }
  out << MetricReport::csv_header() << "\n" << r.csv_row() << "\n";
  return 0;
}

int cmd_ablate(const Common& c, const std::string& grid_text, std::ostream& out) {
  Config base = validated_or_throw(resolve_config(c));
  const fs::path dir = c.out_dir;
  write_snapshot(dir, base);
  if (base.objective.variant == Variant::kBaseline) {
    throw Error(ErrorCode::kConfigInvalid, "weight ablation needs an ASL variant");
  }
  const auto grid = parse_grid(grid_text);
  const auto manifest = load_dataset(base);
  auto extractor = make_feature_extractor(base.networks);

  std::vector<AblationRow> rows;
  std::vector<std::pair<double, double>> weights;
  for (double w : grid) {
    Config cfg = base;
    if (cfg.objective.uses_binary()) cfg.set("objective.w_b", format_double(w));
    if (cfg.objective.uses_multiclass()) cfg.set("objective.w_m", format_double(w));
    cfg = validated_or_throw(cfg);
    const fs::path run_dir = dir / "runs" / grid_label(w);
    write_snapshot(run_dir, cfg);
    TrainOptions o;
    o.out_dir = run_dir;
    auto tr = train(cfg, manifest, o);
    auto rep = evaluate_run(tr.final_checkpoint.string(), manifest, {true, false}, *extractor, nullptr);
    rows.push_back({w, *rep.fid, 0});
    weights.emplace_back(cfg.objective.w_b, cfg.objective.w_m);
    out << grid_label(w) << " fid " << format_double(*rep.fid) << "\n";
  }
  std::vector<std::size_t> order(rows.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return rows[a].fid < rows[b].fid; });
  fs::create_directories(dir / "reports");
  std::ofstream csv(dir / "reports" / "ablation.csv", std::ios::trunc);
  if (!csv) throw Error(ErrorCode::kIoError, "cannot write ablation table");
  csv << "rank,weight,w_b,w_m,fid\n";
  out << "rank  weight  fid\n";
  for (std::size_t r = 0; r < order.size(); ++r) {
    auto& row = rows[order[r]];
    row.rank = static_cast<int>(r) + 1;
    const auto& [wb, wm] = weights[order[r]];
    csv << row.rank << "," << format_double(row.weight) << "," << format_double(wb) << ","
        << format_double(wm) << "," << format_double(row.fid) << "\n";
    out << std::setw(4) << row.rank << "  " << std::setw(6) << format_double(row.weight) << "  "
        << format_double(row.fid) << "\n";
  }
  return 0;
}

void emit_error(const std::string& command, const std::string& out_dir, const std::string& code,
                const std::string& message, int status, std::ostream& err) {
  nlohmann::json rec = {{"status", "error"},
                        {"command", command},
                        {"code", code},
                        {"message", message},
                        {"exit_code", status}};
  err << rec.dump() << "\n";
  if (!out_dir.empty()) {
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    std::ofstream f(fs::path(out_dir) / "error.json");
    if (f) f << rec.dump(2) << "\n";
  }
}

}  // namespace

std::vector<AblationRow> read_ablation_table(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIoError, "cannot read " + path);
  std::vector<AblationRow> rows;
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string f[5];
    for (auto& s : f) std::getline(ss, s, ',');
    rows.push_back({std::stod(f[1]), std::stod(f[4]), std::stoi(f[0])});
  }
  return rows;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"adversarial segmentation loss for image-to-image translation"};
  app.require_subcommand(1);

  Common synth_c, prep_c, train_c, color_c, eval_c, ablate_c;
  int n_train = 256, n_test = 64;
  std::string source, annotations, images, category;
  std::string resume;
  int stop_after = -1;
  std::string color_ck, color_in, color_role = role::kG;
  std::string eval_ck, eval_metrics = "fid,miou";
  std::string grid = "0.1,0.5,1.0,5.0,10.0";

  auto* synth = app.add_subcommand("synth-data", "generate the synthetic shape dataset");
  add_common(synth, synth_c);
  synth->add_option("--train", n_train, "training images")->check(CLI::PositiveNumber);
  synth->add_option("--test", n_test, "test images")->check(CLI::PositiveNumber);

  auto* prep = app.add_subcommand("prepare-data", "build a sketch/photo dataset");
  add_common(prep, prep_c);
  prep->add_option("--source", source, "folder with trainB/testB photos");
  prep->add_option("--annotations", annotations, "COCO-style annotation json");
  prep->add_option("--images", images, "image folder for --annotations");
  prep->add_option("--category", category, "category to keep");

  auto* tr = app.add_subcommand("train", "train a model");
  add_common(tr, train_c);
  tr->add_option("--resume", resume, "checkpoint to resume from");
  tr->add_option("--stop-after-epoch", stop_after, "stop early after this many epochs");

  auto* col = app.add_subcommand("colorize", "run a trained generator on images");
  add_common(col, color_c);
  col->add_option("--checkpoint", color_ck, "checkpoint (default <out>/checkpoints/final.ckpt)");
  col->add_option("--input", color_in, "input image folder");
  col->add_option("--role", color_role, "generator role")
      ->check(CLI::IsMember({std::string(role::kG), std::string(role::kGY)}));

  auto* ev = app.add_subcommand("evaluate", "FID / mIoU of a checkpoint on the test split");
  add_common(ev, eval_c);
  ev->add_option("--checkpoint", eval_ck, "checkpoint (default <out>/checkpoints/final.ckpt)");
  ev->add_option("--metrics", eval_metrics, "comma list of fid,miou");

  auto* ab = app.add_subcommand("ablate-weights", "train and rank a grid of ASL weights");
  add_common(ab, ablate_c);
  ab->add_option("--grid", grid, "comma separated weights");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    emit_error(args.empty() ? "" : args.front(), "", "UsageError", e.what(), kExitUsage, err);
    return kExitUsage;
  }

  CLI::App* sub = app.get_subcommands().front();
  Common* c = sub == synth ? &synth_c
              : sub == prep ? &prep_c
              : sub == tr   ? &train_c
              : sub == col  ? &color_c
              : sub == ev   ? &eval_c
                            : &ablate_c;
  try {
    collect_overrides(sub, *c);
    if (sub == synth) return cmd_synth(*c, n_train, n_test);
    if (sub == prep) return cmd_prepare(*c, source, annotations, images, category);
    if (sub == tr) return cmd_train(*c, resume, stop_after, out);
    if (sub == col) return cmd_colorize(*c, color_ck, color_in, color_role, out);
    if (sub == ev) return cmd_evaluate(*c, eval_ck, eval_metrics, out);
    return cmd_ablate(*c, grid, out);
  } catch (const Error& e) {
    emit_error(sub->get_name(), c->out_dir, std::string(error_name(e.code())), e.what(),
               kExitFailure, err);
  } catch (const std::exception& e) {
    emit_error(sub->get_name(), c->out_dir, "InternalError", e.what(), kExitFailure, err);
  }
  return kExitFailure;
}

}  // namespace asl::cli
