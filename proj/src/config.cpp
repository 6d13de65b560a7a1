#include "asl/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

namespace asl {

namespace {

template <typename E, std::size_t N>
E parse_enum(std::string_view s, const std::pair<std::string_view, E> (&table)[N],
             std::string_view what) {
  for (const auto& [name, value] : table) {
    if (name == s) return value;
  }
  throw Error(ErrorCode::kConfigInvalid,
              "unknown " + std::string(what) + " '" + std::string(s) + "'");
}

constexpr std::pair<std::string_view, Variant> kVariants[] = {
    {"multiclass", Variant::kMulticlass},
    {"binary", Variant::kBinary},
    {"combined", Variant::kCombined},
    {"baseline", Variant::kBaseline}};
constexpr std::pair<std::string_view, Baseline> kBaselines[] = {
    {"paired", Baseline::kPaired}, {"unpaired", Baseline::kUnpaired}};
constexpr std::pair<std::string_view, Task> kTasks[] = {
    {"s2p", Task::kSketch2Photo}, {"l2p", Task::kLabel2Photo}};
constexpr std::pair<std::string_view, GanMode> kGanModes[] = {
    {"ce", GanMode::kCrossEntropy}, {"lsgan", GanMode::kLeastSquares}};
constexpr std::pair<std::string_view, GeneratorArch> kArchs[] = {
    {"resnet", GeneratorArch::kResnetBlocks}, {"unet", GeneratorArch::kUnet}};
constexpr std::pair<std::string_view, EdgeMethod> kEdgeMethods[] = {
    {"hed", EdgeMethod::kPretrainedHed},
    {"xdog", EdgeMethod::kXdog},
    {"gradient", EdgeMethod::kGradientFallback}};
constexpr std::pair<std::string_view, BackendKind> kBackends[] = {
    {"stub", BackendKind::kStub}, {"pretrained", BackendKind::kPretrained}};
constexpr std::pair<std::string_view, OptimizerKind> kOptimizers[] = {
    {"adam", OptimizerKind::kAdam}};

template <typename E, std::size_t N>
std::string_view enum_name(E v, const std::pair<std::string_view, E> (&table)[N]) {
  for (const auto& [name, value] : table) {
    if (value == v) return name;
  }
  return "?";
}

double parse_double(std::string_view s) {
  double v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) {
    throw Error(ErrorCode::kConfigInvalid, "not a number: '" + std::string(s) + "'");
  }
  return v;
}

template <typename Int>
Int parse_int(std::string_view s) {
  Int v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw Error(ErrorCode::kConfigInvalid, "not an integer: '" + std::string(s) + "'");
  }
  return v;
}

bool parse_bool(std::string_view s) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw Error(ErrorCode::kConfigInvalid, "not a boolean: '" + std::string(s) + "'");
}

// "3,4" or ranges "0-79,90".
std::vector<int> parse_id_list(std::string_view s) {
  std::vector<int> out;
  std::size_t pos = 0;
  while (pos < s.size()) {
    std::size_t end = s.find(',', pos);
    if (end == std::string_view::npos) end = s.size();
    std::string_view item = s.substr(pos, end - pos);
    if (auto dash = item.find('-'); dash != std::string_view::npos && dash > 0) {
      int lo = parse_int<int>(item.substr(0, dash));
      int hi = parse_int<int>(item.substr(dash + 1));
      for (int i = lo; i <= hi; ++i) out.push_back(i);
    } else if (!item.empty()) {
      out.push_back(parse_int<int>(item));
    }
    pos = end + 1;
  }
  return out;
}

std::string format_id_list(const std::vector<int>& ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size();) {
    std::size_t j = i;
    while (j + 1 < ids.size() && ids[j + 1] == ids[j] + 1) ++j;
    if (!out.empty()) out += ',';
    out += std::to_string(ids[i]);
    if (j > i + 1) {
      out += '-' + std::to_string(ids[j]);
    } else if (j == i + 1) {
      out += ',' + std::to_string(ids[j]);
    }
    i = j + 1;
  }
  return out;
}

struct KeySpec {
  std::string_view section;
  std::string_view name;
  std::function<std::string(const Config&)> get;
  std::function<void(Config&, std::string_view)> set;
};

#define ASL_NUM_KEY(sec, field, type, parse)                                 \
  KeySpec{#sec, #field,                                                      \
          [](const Config& c) { return format_value(c.sec.field); },         \
          [](Config& c, std::string_view v) { c.sec.field = parse(v); }}
#define ASL_ENUM_KEY(sec, field, table)                                      \
  KeySpec{#sec, #field,                                                      \
          [](const Config& c) { return std::string(enum_name(c.sec.field, table)); }, \
          [](Config& c, std::string_view v) { c.sec.field = parse_enum(v, table, #field); }}
#define ASL_STR_KEY(sec, field)                                              \
  KeySpec{#sec, #field, [](const Config& c) { return c.sec.field; },         \
          [](Config& c, std::string_view v) { c.sec.field = std::string(v); }}

std::string format_value(double v) { return format_double(v); }
std::string format_value(int v) { return std::to_string(v); }
std::string format_value(std::uint64_t v) { return std::to_string(v); }
std::string format_value(bool v) { return v ? "true" : "false"; }

const std::vector<KeySpec>& key_table() {
  static const std::vector<KeySpec> table = {
      ASL_NUM_KEY(run, resolution, int, parse_int<int>),
      ASL_NUM_KEY(run, epochs, int, parse_int<int>),
      ASL_NUM_KEY(run, learning_rate, double, parse_double),
      ASL_ENUM_KEY(run, optimizer, kOptimizers),
      ASL_NUM_KEY(run, beta1, double, parse_double),
      ASL_NUM_KEY(run, beta2, double, parse_double),
      ASL_NUM_KEY(run, seed, std::uint64_t, parse_int<std::uint64_t>),
      ASL_ENUM_KEY(run, task, kTasks),
      ASL_NUM_KEY(run, batch_size, int, parse_int<int>),
      ASL_NUM_KEY(run, lr_decay, bool, parse_bool),
      ASL_NUM_KEY(run, checkpoint_interval, int, parse_int<int>),
      ASL_NUM_KEY(run, eval_interval, int, parse_int<int>),
      ASL_NUM_KEY(run, prefetch, int, parse_int<int>),
      ASL_ENUM_KEY(objective, variant, kVariants),
      ASL_ENUM_KEY(objective, baseline, kBaselines),
      ASL_NUM_KEY(objective, w_g, double, parse_double),
      ASL_NUM_KEY(objective, w_b, double, parse_double),
      ASL_NUM_KEY(objective, w_m, double, parse_double),
      ASL_NUM_KEY(objective, lambda_l1, double, parse_double),
      ASL_NUM_KEY(objective, lambda_cyc, double, parse_double),
      KeySpec{"objective", "gan_mode",
              [](const Config& c) {
                return std::string(enum_name(c.objective.resolved_gan_mode(), kGanModes));
              },
              [](Config& c, std::string_view v) {
                c.objective.gan_mode = parse_enum(v, kGanModes, "gan_mode");
              }},
      ASL_STR_KEY(data, dataset_dir),
      ASL_STR_KEY(data, dataset_name),
      ASL_ENUM_KEY(data, edge_method, kEdgeMethods),
      ASL_NUM_KEY(data, edge_sigma, double, parse_double),
      ASL_NUM_KEY(data, edge_binarize, bool, parse_bool),
      ASL_NUM_KEY(data, edge_threshold, double, parse_double),
      ASL_STR_KEY(data, hed_prototxt),
      ASL_STR_KEY(data, hed_weights),
      ASL_NUM_KEY(data, train_ratio, double, parse_double),
      ASL_STR_KEY(data, split_preset),
      ASL_ENUM_KEY(networks, generator_arch, kArchs),
      ASL_NUM_KEY(networks, generator_width, int, parse_int<int>),
      ASL_NUM_KEY(networks, generator_blocks, int, parse_int<int>),
      ASL_NUM_KEY(networks, unet_depth, int, parse_int<int>),
      ASL_NUM_KEY(networks, disc_width, int, parse_int<int>),
      ASL_NUM_KEY(networks, disc_layers, int, parse_int<int>),
      ASL_ENUM_KEY(networks, seg_backend, kBackends),
      ASL_STR_KEY(networks, seg_weights),
      ASL_NUM_KEY(networks, seg_classes, int, parse_int<int>),
      KeySpec{"networks", "seg_foreground",
              [](const Config& c) { return format_id_list(c.networks.seg_foreground); },
              [](Config& c, std::string_view v) {
                c.networks.seg_foreground = parse_id_list(v);
              }},
      ASL_NUM_KEY(networks, seg_temperature, double, parse_double),
      ASL_ENUM_KEY(networks, extractor, kBackends),
      ASL_STR_KEY(networks, extractor_weights),
      ASL_NUM_KEY(networks, extractor_dim, int, parse_int<int>),
  };
  return table;
}

#undef ASL_NUM_KEY
#undef ASL_ENUM_KEY
#undef ASL_STR_KEY

const KeySpec& find_key(std::string_view key) {
  std::string_view section;
  std::string_view name = key;
  if (auto dot = key.find('.'); dot != std::string_view::npos) {
    section = key.substr(0, dot);
    name = key.substr(dot + 1);
  }
  for (const auto& spec : key_table()) {
    if (spec.name == name && (section.empty() || spec.section == section)) return spec;
  }
  throw Error(ErrorCode::kConfigInvalid, "unknown config key '" + std::string(key) + "'");
}

}  // namespace

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

std::string_view to_string(Variant v) { return enum_name(v, kVariants); }
std::string_view to_string(Baseline b) { return enum_name(b, kBaselines); }
std::string_view to_string(Task t) { return enum_name(t, kTasks); }
std::string_view to_string(GanMode m) { return enum_name(m, kGanModes); }
std::string_view to_string(GeneratorArch a) { return enum_name(a, kArchs); }
std::string_view to_string(EdgeMethod m) { return enum_name(m, kEdgeMethods); }
std::string_view to_string(BackendKind k) { return enum_name(k, kBackends); }

Variant parse_variant(std::string_view s) { return parse_enum(s, kVariants, "variant"); }
Baseline parse_baseline(std::string_view s) { return parse_enum(s, kBaselines, "baseline"); }
Task parse_task(std::string_view s) { return parse_enum(s, kTasks, "task"); }

ObjectiveConfig ObjectiveConfig::for_variant(Variant v, Baseline b) {
  ObjectiveConfig cfg;
  cfg.variant = v;
  cfg.baseline = b;
  cfg.w_b = cfg.uses_binary() ? 1.0 : 0.0;
  cfg.w_m = cfg.uses_multiclass() ? 1.0 : 0.0;
  return cfg;
}

std::vector<std::string> Config::keys() {
  std::vector<std::string> out;
  for (const auto& spec : key_table()) {
    out.push_back(std::string(spec.section) + "." + std::string(spec.name));
  }
  return out;
}

void Config::set(std::string_view key, std::string_view value) {
  const KeySpec& spec = find_key(key);
  spec.set(*this, value);
  explicit_keys.insert(std::string(spec.section) + "." + std::string(spec.name));
}

std::string Config::get(std::string_view key) const { return find_key(key).get(*this); }

std::string Config::serialize() const {
  std::string out;
  std::string_view section;
  for (const auto& spec : key_table()) {
    if (spec.section != section) {
      if (!section.empty()) out += '\n';
      section = spec.section;
      out += '[' + std::string(section) + "]\n";
    }
    out += std::string(spec.name) + " = " + spec.get(*this) + '\n';
  }
  return out;
}

Config Config::parse(std::string_view text) {
  boost::property_tree::ptree tree;
  std::istringstream in{std::string(text)};
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw Error(ErrorCode::kConfigInvalid, e.what());
  }
  Config cfg;
  for (const auto& [section, children] : tree) {
    if (children.empty()) {
      throw Error(ErrorCode::kConfigInvalid, "key '" + section + "' outside a section");
    }
    for (const auto& [name, node] : children) {
      const std::string key = section + "." + name;
      const KeySpec& spec = find_key(key);
      if (spec.section != section) {
        throw Error(ErrorCode::kConfigInvalid, "unknown config key '" + key + "'");
      }
      cfg.set(key, node.data());
    }
  }
  return cfg;
}

Config Config::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kConfigInvalid, "cannot read config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

void Config::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIoError, "cannot write config '" + path + "'");
  out << serialize();
}

ValidationResult validate_config(Config cfg) {
  std::vector<ConfigIssue> issues;
  auto fail = [&](ErrorCode code, std::string msg) {
    issues.push_back({code, std::move(msg)});
  };

  ObjectiveConfig& obj = cfg.objective;
  const ObjectiveConfig canonical = ObjectiveConfig::for_variant(obj.variant, obj.baseline);
  if (!cfg.explicit_keys.contains("objective.w_b")) obj.w_b = canonical.w_b;
  if (!cfg.explicit_keys.contains("objective.w_m")) obj.w_m = canonical.w_m;

  const std::string variant(to_string(obj.variant));
  if (obj.w_g < 0 || obj.w_b < 0 || obj.w_m < 0) {
    fail(ErrorCode::kConfigInvalid, "objective weights must be >= 0");
  }
  if (!obj.uses_binary() && obj.w_b != 0) {
    fail(ErrorCode::kVariantWeightConflict,
         "variant " + variant + " requires w_b = 0, got " + format_double(obj.w_b));
  }
  if (!obj.uses_multiclass() && obj.w_m != 0) {
    fail(ErrorCode::kVariantWeightConflict,
         "variant " + variant + " requires w_m = 0, got " + format_double(obj.w_m));
  }
  if (obj.uses_binary() && obj.w_b == 0) {
    fail(ErrorCode::kVariantWeightConflict, "variant " + variant + " requires w_b > 0");
  }
  if (obj.uses_multiclass() && obj.w_m == 0) {
    fail(ErrorCode::kVariantWeightConflict, "variant " + variant + " requires w_m > 0");
  }
  if (obj.lambda_l1 < 0 || obj.lambda_cyc < 0) {
    fail(ErrorCode::kConfigInvalid, "lambda_l1 and lambda_cyc must be >= 0");
  }

  const RunConfig& run = cfg.run;
  if (!(run.learning_rate > 0)) {
    fail(ErrorCode::kNonPositiveLearningRate,
         "learning_rate must be > 0, got " + format_double(run.learning_rate));
  }
  if (run.resolution <= 0 || run.resolution % 4 != 0) {
    fail(ErrorCode::kConfigInvalid, "resolution must be positive and divisible by 4, got " +
                                        std::to_string(run.resolution));
  }
  if (run.epochs < 0) fail(ErrorCode::kConfigInvalid, "epochs must be >= 0");
  if (run.batch_size < 1) fail(ErrorCode::kConfigInvalid, "batch_size must be >= 1");
  if (run.checkpoint_interval < 0 || run.eval_interval < 0 || run.prefetch < 0) {
    fail(ErrorCode::kConfigInvalid, "intervals and prefetch must be >= 0");
  }
  if (!(run.beta1 >= 0 && run.beta1 < 1 && run.beta2 >= 0 && run.beta2 < 1)) {
    fail(ErrorCode::kConfigInvalid, "adam betas must lie in [0, 1)");
  }

  const NetworkConfig& net = cfg.networks;
  if (net.generator_width < 1 || net.disc_width < 1 || net.disc_layers < 0 ||
      net.generator_blocks < 0 || net.unet_depth < 1) {
    fail(ErrorCode::kConfigInvalid, "network widths/depths out of range");
  }
  if (net.generator_arch == GeneratorArch::kUnet && run.resolution > 0 &&
      (net.unet_depth >= 31 || run.resolution % (1 << net.unet_depth) != 0)) {
    fail(ErrorCode::kConfigInvalid, "unet_depth " + std::to_string(net.unet_depth) +
                                        " needs resolution divisible by 2^depth");
  }
  if (net.seg_classes < 2) fail(ErrorCode::kConfigInvalid, "seg_classes must be >= 2");
  {
    std::set<int> fg(net.seg_foreground.begin(), net.seg_foreground.end());
    if (fg.empty()) {
      fail(ErrorCode::kEmptyForegroundSet, "seg_foreground is empty");
    } else if (*fg.begin() < 0 || *fg.rbegin() >= net.seg_classes ||
               static_cast<int>(fg.size()) >= net.seg_classes) {
      fail(ErrorCode::kConfigInvalid,
           "seg_foreground must be a strict subset of [0, seg_classes)");
    }
  }
  if (net.seg_temperature <= 0) fail(ErrorCode::kConfigInvalid, "seg_temperature must be > 0");
  if (net.extractor_dim < 1) fail(ErrorCode::kConfigInvalid, "extractor_dim must be >= 1");
  if (!(cfg.data.train_ratio > 0 && cfg.data.train_ratio < 1)) {
    fail(ErrorCode::kConfigInvalid, "train_ratio must lie in (0, 1)");
  }

  ValidationResult result;
  result.issues = std::move(issues);
  if (result.issues.empty()) result.config = std::move(cfg);
  return result;
}

Config validated_or_throw(Config cfg) {
  ValidationResult r = validate_config(std::move(cfg));
  if (r.ok()) return *std::move(r.config);
  std::string msg;
  for (std::size_t i = 0; i < r.issues.size(); ++i) {
    if (i > 0) msg += "; " + std::string(error_name(r.issues[i].code)) + ": ";
    msg += r.issues[i].message;
  }
  throw Error(r.issues.front().code, msg);
}

}  // namespace asl
