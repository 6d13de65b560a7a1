#include "asl/datapipe.hpp"

#include <algorithm>
#include <condition_variable>
#include <deque>
#include <fstream>
#include <iostream>
#include <mutex>
#include <numeric>
#include <set>
#include <thread>

#include <nlohmann/json.hpp>
#include <opencv2/dnn.hpp>
#include <opencv2/dnn/layer.details.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "asl/error.hpp"
#include "asl/segbackend.hpp"

namespace asl {

namespace fs = std::filesystem;

std::string_view to_string(Layout l) {
  return l == Layout::kPairedAB ? "paired_ab" : "unpaired_ab";
}

namespace {

const char* const kFolders[] = {"trainA", "trainB", "testA", "testB"};

bool is_image_file(const fs::path& p) {
  static const std::set<std::string> exts = {".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".pgm"};
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
  return exts.contains(ext);
}

std::vector<std::string> list_images(const fs::path& dir) {
  std::vector<std::string> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && is_image_file(e.path())) out.push_back(e.path().filename().string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::string stem_of(const std::string& file) { return fs::path(file).stem().string(); }

Layout parse_layout(const std::string& s) {
  if (s == "paired_ab") return Layout::kPairedAB;
  if (s == "unpaired_ab") return Layout::kUnpairedAB;
  throw Error(ErrorCode::kConfigInvalid, "unknown layout '" + s + "'");
}

}  // namespace

std::size_t DatasetManifest::count(const std::string& folder) const {
  auto it = files.find(folder);
  return it == files.end() ? 0 : it->second.size();
}

void DatasetManifest::verify() const {
  for (const char* folder : kFolders) {
    auto on_disk = list_images(root() / folder);
    if (on_disk.size() != count(folder)) {
      throw Error(ErrorCode::kShapeMismatch,
                  std::string(folder) + ": manifest lists " + std::to_string(count(folder)) +
                      " files, disk holds " + std::to_string(on_disk.size()));
    }
  }
  if (layout == Layout::kPairedAB) {
    for (const char* split : {"train", "test"}) {
      const auto& a = files.at(std::string(split) + "A");
      const auto& b = files.at(std::string(split) + "B");
      if (a.size() != b.size()) {
        throw Error(ErrorCode::kLayoutModeMismatch,
                    std::string(split) + ": paired layout with unequal A/B counts");
      }
      for (std::size_t i = 0; i < a.size(); ++i) {
        if (stem_of(a[i]) != stem_of(b[i])) {
          throw Error(ErrorCode::kLayoutModeMismatch, "unmatched stem " + a[i]);
        }
      }
    }
  }
}

void DatasetManifest::save(const fs::path& path) const {
  nlohmann::json j;
  j["name"] = name;
  j["task"] = std::string(to_string(task));
  j["layout"] = std::string(to_string(layout));
  j["resolution"] = resolution;
  j["files"] = files;
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIoError, "cannot write manifest " + path.string());
  out << j.dump(2) << '\n';
}

DatasetManifest DatasetManifest::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIoError, "cannot read manifest " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kConfigInvalid, "bad manifest: " + std::string(e.what()));
  }
  DatasetManifest m;
  m.name = j.at("name").get<std::string>();
  m.task = parse_task(j.at("task").get<std::string>());
  m.layout = parse_layout(j.at("layout").get<std::string>());
  m.resolution = j.at("resolution").get<int>();
  m.files = j.at("files").get<std::map<std::string, std::vector<std::string>>>();
  m.source_dir = path.parent_path().string();
  return m;
}

DatasetManifest DatasetManifest::scan(const fs::path& dir, std::string name, Task task,
                                      Layout layout, int resolution) {
  DatasetManifest m;
  m.name = std::move(name);
  m.task = task;
  m.layout = layout;
  m.resolution = resolution;
  m.source_dir = dir.string();
  for (const char* folder : kFolders) m.files[folder] = list_images(dir / folder);
  return m;
}

// ---------------------------------------------------------------- images

cv::Mat resize_square(const cv::Mat& img, int resolution) {
  if (resolution <= 0 || (img.rows == resolution && img.cols == resolution)) return img.clone();
  cv::Mat out;
  const bool shrink = img.rows > resolution || img.cols > resolution;
  cv::resize(img, out, cv::Size(resolution, resolution), 0, 0,
             shrink ? cv::INTER_AREA : cv::INTER_LINEAR);
  return out;
}

cv::Mat read_image(const fs::path& path, int channels) {
  cv::Mat img = cv::imread(path.string(), channels == 1 ? cv::IMREAD_GRAYSCALE : cv::IMREAD_COLOR);
  if (img.empty()) throw Error(ErrorCode::kIoError, "cannot read image " + path.string());
  if (channels == 3) cv::cvtColor(img, img, cv::COLOR_BGR2RGB);
  return img;
}

void write_rgb(const fs::path& path, const cv::Mat& rgb) {
  cv::Mat out = rgb;
  if (rgb.channels() == 3) cv::cvtColor(rgb, out, cv::COLOR_RGB2BGR);
  if (!cv::imwrite(path.string(), out)) {
    throw Error(ErrorCode::kIoError, "cannot write image " + path.string());
  }
}

void write_mask(const fs::path& path, const cv::Mat& mask) {
  std::vector<uchar> buf;
  cv::imencode(".pgm", mask, buf);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw Error(ErrorCode::kIoError, "cannot write mask " + path.string());
}

cv::Mat read_mask(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return {};
  std::vector<uchar> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  cv::Mat m = cv::imdecode(buf, cv::IMREAD_GRAYSCALE);
  if (m.empty()) throw Error(ErrorCode::kIoError, "bad mask file " + path.string());
  return m;
}

torch::Tensor to_tensor(const cv::Mat& img) {
  cv::Mat c = img.isContinuous() ? img : img.clone();
  auto t = torch::from_blob(c.data, {c.rows, c.cols, c.channels()}, torch::kUInt8)
               .permute({2, 0, 1})
               .to(torch::kFloat32);
  return t / 127.5 - 1.0;
}

cv::Mat to_image(const torch::Tensor& t) {
  auto u = ((t.detach().to(torch::kFloat32).clamp(-1.0, 1.0) + 1.0) * 127.5)
               .round()
               .to(torch::kUInt8)
               .permute({1, 2, 0})
               .contiguous();
  const int c = static_cast<int>(u.size(2));
  cv::Mat out(static_cast<int>(u.size(0)), static_cast<int>(u.size(1)), CV_8UC(c));
  std::memcpy(out.data, u.data_ptr(), u.numel());
  return out;
}

// ---------------------------------------------------------------- edges

EdgeExtractorSpec EdgeExtractorSpec::from_config(const Config& cfg) {
  EdgeExtractorSpec s;
  s.method = cfg.data.edge_method;
  s.sigma = cfg.data.edge_sigma;
  s.binarize = cfg.data.edge_binarize;
  s.threshold = cfg.data.edge_threshold;
  s.resolution = cfg.run.resolution;
  s.hed_prototxt = cfg.data.hed_prototxt;
  s.hed_weights = cfg.data.hed_weights;
  return s;
}

namespace {

cv::Mat to_gray01(const cv::Mat& img) {
  cv::Mat gray;
  if (img.channels() == 3) {
    cv::cvtColor(img, gray, cv::COLOR_RGB2GRAY);
  } else {
    gray = img;
  }
  cv::Mat f;
  gray.convertTo(f, CV_32F, 1.0 / 255.0);
  return f;
}

cv::Mat gradient_edges(const cv::Mat& img, double sigma) {
  cv::Mat g = to_gray01(img);
  if (sigma > 0) cv::GaussianBlur(g, g, cv::Size(0, 0), sigma, sigma, cv::BORDER_REPLICATE);
  cv::Mat mag(g.size(), CV_32F, cv::Scalar(0));
  for (int r = 0; r < g.rows; ++r) {
    for (int c = 0; c < g.cols; ++c) {
      const float v = g.at<float>(r, c);
      const float dx = c + 1 < g.cols ? g.at<float>(r, c + 1) - v : 0.f;
      const float dy = r + 1 < g.rows ? g.at<float>(r + 1, c) - v : 0.f;
      mag.at<float>(r, c) = std::sqrt(dx * dx + dy * dy);
    }
  }
  double max_v = 0;
  cv::minMaxLoc(mag, nullptr, &max_v);
  if (max_v > 1e-12) mag /= max_v;
  return mag;
}

// Extended difference of Gaussians, returned as edge strength (1 = line).
cv::Mat xdog_edges(const cv::Mat& img, double sigma) {
  constexpr double kScale = 1.6, kTau = 0.98, kEps = 0.1, kPhi = 200.0;
  cv::Mat g = to_gray01(img);
  const double s = sigma > 0 ? sigma : 0.5;
  cv::Mat g1, g2;
  cv::GaussianBlur(g, g1, cv::Size(0, 0), s, s, cv::BORDER_REPLICATE);
  cv::GaussianBlur(g, g2, cv::Size(0, 0), s * kScale, s * kScale, cv::BORDER_REPLICATE);
  cv::Mat d = g1 - kTau * g2;
  cv::Mat out(d.size(), CV_32F);
  for (int r = 0; r < d.rows; ++r) {
    for (int c = 0; c < d.cols; ++c) {
      const double v = d.at<float>(r, c);
      const double white = v >= kEps ? 1.0 : 1.0 + std::tanh(kPhi * (v - kEps));
      out.at<float>(r, c) = static_cast<float>(std::clamp(1.0 - white, 0.0, 1.0));
    }
  }
  return out;
}

// HED's Caffe model crops the upsampled side outputs to the input size.
class CropLayer : public cv::dnn::Layer {
 public:
  explicit CropLayer(const cv::dnn::LayerParams& params) : cv::dnn::Layer(params) {}
  static cv::Ptr<cv::dnn::Layer> create(cv::dnn::LayerParams& params) {
    return cv::Ptr<cv::dnn::Layer>(new CropLayer(params));
  }
  bool getMemoryShapes(const std::vector<std::vector<int>>& inputs, const int,
                       std::vector<std::vector<int>>& outputs,
                       std::vector<std::vector<int>>&) const override {
    std::vector<int> out = inputs[0];
    out[2] = inputs[1][2];
    out[3] = inputs[1][3];
    outputs.assign(1, out);
    return false;
  }
  void forward(cv::InputArrayOfArrays in_arr, cv::OutputArrayOfArrays out_arr,
               cv::OutputArrayOfArrays) override {
    std::vector<cv::Mat> inputs, outputs;
    in_arr.getMatVector(inputs);
    out_arr.getMatVector(outputs);
    const cv::Mat& in = inputs[0];
    cv::Mat& out = outputs[0];
    const int y0 = (in.size[2] - out.size[2]) / 2;
    const int x0 = (in.size[3] - out.size[3]) / 2;
    const cv::Range ranges[] = {cv::Range::all(), cv::Range::all(),
                                cv::Range(y0, y0 + out.size[2]), cv::Range(x0, x0 + out.size[3])};
    in(ranges).copyTo(out);
  }
};

std::vector<cv::Mat> hed_edges(const std::vector<cv::Mat>& images, const EdgeExtractorSpec& spec) {
  if (spec.hed_prototxt.empty() || spec.hed_weights.empty() || !fs::exists(spec.hed_prototxt) ||
      !fs::exists(spec.hed_weights)) {
    throw Error(ErrorCode::kMissingWeights,
                "HED needs hed_prototxt and hed_weights (got '" + spec.hed_prototxt + "', '" +
                    spec.hed_weights + "')");
  }
  static std::once_flag registered;
  std::call_once(registered, [] { CV_DNN_REGISTER_LAYER_CLASS(Crop, CropLayer); });
  auto net = cv::dnn::readNetFromCaffe(spec.hed_prototxt, spec.hed_weights);
  std::vector<cv::Mat> out;
  for (const auto& img : images) {
    cv::Mat bgr;
    if (img.channels() == 1) {
      cv::cvtColor(img, bgr, cv::COLOR_GRAY2BGR);
    } else {
      cv::cvtColor(img, bgr, cv::COLOR_RGB2BGR);
    }
    auto blob = cv::dnn::blobFromImage(bgr, 1.0, bgr.size(),
                                       cv::Scalar(104.00698793, 116.66876762, 122.67891434),
                                       false, false);
    net.setInput(blob);
    cv::Mat res = net.forward();
    cv::Mat edge(res.size[2], res.size[3], CV_32F, res.ptr<float>());
    out.push_back(edge.clone());
  }
  return out;
}

}  // namespace

std::vector<cv::Mat> extract_edges(const std::vector<cv::Mat>& images,
                                   const EdgeExtractorSpec& spec) {
  std::vector<cv::Mat> resized;
  resized.reserve(images.size());
  for (const auto& img : images) resized.push_back(resize_square(img, spec.resolution));

  std::vector<cv::Mat> out;
  switch (spec.method) {
    case EdgeMethod::kPretrainedHed:
      out = hed_edges(resized, spec);
      break;
    case EdgeMethod::kXdog:
      for (const auto& img : resized) out.push_back(xdog_edges(img, spec.sigma));
      break;
    case EdgeMethod::kGradientFallback:
      for (const auto& img : resized) out.push_back(gradient_edges(img, spec.sigma));
      break;
  }
  for (auto& e : out) {
    cv::min(cv::max(e, 0.0), 1.0, e);
    if (spec.binarize) cv::threshold(e, e, spec.threshold, 1.0, cv::THRESH_BINARY);
  }
  return out;
}

namespace {

cv::Mat edge_to_u8(const cv::Mat& edge) {
  cv::Mat u8;
  edge.convertTo(u8, CV_8U, 255.0);
  return u8;
}

}  // namespace

// ---------------------------------------------------------------- curation

std::optional<SplitPreset> find_split_preset(std::string_view name) {
  static constexpr SplitPreset kPresets[] = {
      {"bedroom", 1355, 135}, {"cityscapes", 2975, 500}, {"illustration", 659, 131},
      {"elephant", 1800, 343}, {"sheep", 1300, 229},
  };
  for (const auto& p : kPresets) {
    if (p.name == name) return p;
  }
  return std::nullopt;
}

DatasetManifest curate_by_category(const fs::path& annotation_store, const fs::path& image_dir,
                                   const std::string& category, const fs::path& out_dir,
                                   const CurateOptions& opts) {
  std::ifstream in(annotation_store);
  if (!in) throw Error(ErrorCode::kIoError, "cannot read " + annotation_store.string());
  nlohmann::json store;
  try {
    in >> store;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kConfigInvalid, "bad annotation store: " + std::string(e.what()));
  }
  std::optional<std::int64_t> category_id;
  for (const auto& c : store.at("categories")) {
    if (c.at("name").get<std::string>() == category) category_id = c.at("id").get<std::int64_t>();
  }
  if (!category_id) throw Error(ErrorCode::kUnknownCategory, category);

  std::set<std::int64_t> members;
  for (const auto& a : store.at("annotations")) {
    if (a.at("category_id").get<std::int64_t>() == *category_id) {
      members.insert(a.at("image_id").get<std::int64_t>());
    }
  }
  std::vector<std::string> selected;
  for (const auto& img : store.at("images")) {
    if (members.contains(img.at("id").get<std::int64_t>())) {
      selected.push_back(img.at("file_name").get<std::string>());
    }
  }
  if (selected.empty()) throw Error(ErrorCode::kEmptyResult, "no images tagged " + category);
  std::sort(selected.begin(), selected.end());
  selected.erase(std::unique(selected.begin(), selected.end()), selected.end());

  std::mt19937_64 rng(opts.seed);
  std::shuffle(selected.begin(), selected.end(), rng);
  std::size_t n_train, n_test;
  if (!opts.split_preset.empty()) {
    auto preset = find_split_preset(opts.split_preset);
    if (!preset) throw Error(ErrorCode::kConfigInvalid, "unknown split preset " + opts.split_preset);
    if (selected.size() < static_cast<std::size_t>(preset->train + preset->test)) {
      throw Error(ErrorCode::kShapeMismatch,
                  "preset " + opts.split_preset + " needs " +
                      std::to_string(preset->train + preset->test) + " images, found " +
                      std::to_string(selected.size()));
    }
    n_train = preset->train;
    n_test = preset->test;
  } else {
    n_train = static_cast<std::size_t>(std::llround(opts.train_ratio * selected.size()));
    n_train = std::clamp<std::size_t>(n_train, selected.size() > 1 ? 1 : 0,
                                      selected.size() > 1 ? selected.size() - 1 : selected.size());
    n_test = selected.size() - n_train;
  }

  for (const char* folder : kFolders) {
    fs::remove_all(out_dir / folder);
    fs::create_directories(out_dir / folder);
  }
  for (std::size_t i = 0; i < n_train + n_test; ++i) {
    const std::string split = i < n_train ? "train" : "test";
    const std::string stem = fs::path(selected[i]).stem().string();
    cv::Mat color = resize_square(read_image(image_dir / selected[i], 3), opts.resolution);
    write_rgb(out_dir / (split + "B") / (stem + ".png"), color);
    EdgeExtractorSpec es = opts.edges;
    es.resolution = opts.resolution;
    auto edges = extract_edges({color}, es);
    cv::imwrite((out_dir / (split + "A") / (stem + ".png")).string(), edge_to_u8(edges[0]));
  }
  auto m = DatasetManifest::scan(out_dir, category, Task::kSketch2Photo, Layout::kPairedAB,
                                 opts.resolution);
  m.save(out_dir / kManifestFile);
  m.verify();
  return m;
}

DatasetManifest prepare_sketches(const fs::path& dataset_dir, std::string name,
                                 const EdgeExtractorSpec& spec, int resolution) {
  for (const char* split : {"train", "test"}) {
    fs::create_directories(dataset_dir / (std::string(split) + "A"));
    for (const auto& file : list_images(dataset_dir / (std::string(split) + "B"))) {
      cv::Mat color = read_image(dataset_dir / (std::string(split) + "B") / file, 3);
      EdgeExtractorSpec es = spec;
      es.resolution = resolution;
      auto edges = extract_edges({color}, es);
      cv::imwrite((dataset_dir / (std::string(split) + "A") / (stem_of(file) + ".png")).string(),
                  edge_to_u8(edges[0]));
    }
  }
  auto m = DatasetManifest::scan(dataset_dir, std::move(name), Task::kSketch2Photo,
                                 Layout::kPairedAB, resolution);
  m.save(dataset_dir / kManifestFile);
  m.verify();
  return m;
}

// ---------------------------------------------------------------- synthetic

namespace {

cv::Vec3b palette_rgb(int cls) {
  static const auto palette = synthetic_palette();
  auto c = ((palette[cls] + 1.0) * 127.5).round().to(torch::kInt64);
  return {static_cast<uchar>(c[0].item<int64_t>()), static_cast<uchar>(c[1].item<int64_t>()),
          static_cast<uchar>(c[2].item<int64_t>())};
}

}  // namespace

SyntheticScene render_synthetic_scene(std::mt19937_64& rng, int resolution) {
  const int r = resolution;
  auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  auto uint = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };

  cv::Mat mask(r, r, CV_8UC1, cv::Scalar(0));
  const int horizon = static_cast<int>(uni(0.3, 0.6) * r);
  mask(cv::Rect(0, horizon, r, r - horizon)).setTo(1);
  if (uni(0, 1) < 0.5) {
    const int top = horizon + static_cast<int>(uni(0.05, 0.15) * r);
    const int height = std::max(2, static_cast<int>(uni(0.08, 0.18) * r));
    mask(cv::Rect(0, std::min(top, r - 1), r, std::min(height, r - std::min(top, r - 1)))).setTo(2);
  }
  const int n_things = uint(1, 3);
  std::vector<std::pair<int, double>> shading;  // class, brightness
  for (int i = 0; i < n_things; ++i) {
    const bool box = uni(0, 1) < 0.5;
    const int w = static_cast<int>(uni(0.15, 0.35) * r);
    const int h = static_cast<int>(uni(0.15, 0.35) * r);
    const int cx = uint(w / 2, r - 1 - w / 2);
    const int cy = uint(std::min(horizon, r - 1 - h / 2), std::max(horizon, r - 1 - h / 2));
    if (box) {
      cv::rectangle(mask, cv::Rect(cx - w / 2, cy - h / 2, w, h), cv::Scalar(3), cv::FILLED);
    } else {
      cv::ellipse(mask, cv::Point(cx, cy), cv::Size(w / 2, h / 2), 0, 0, 360, cv::Scalar(4),
                  cv::FILLED);
    }
  }

  cv::Mat color(r, r, CV_8UC3);
  std::uniform_int_distribution<int> noise(-8, 8);
  const double sky_tint = uni(-10, 10);
  for (int y = 0; y < r; ++y) {
    for (int x = 0; x < r; ++x) {
      const int cls = mask.at<uchar>(y, x);
      cv::Vec3b base = palette_rgb(cls);
      double shift = noise(rng);
      if (cls == 0) shift += sky_tint + 12.0 * (static_cast<double>(y) / r - 0.3);
      cv::Vec3b px;
      for (int k = 0; k < 3; ++k) px[k] = cv::saturate_cast<uchar>(base[k] + shift);
      color.at<cv::Vec3b>(y, x) = px;
    }
  }
  return {color, mask};
}

cv::Mat render_label_map(const cv::Mat& mask) {
  static const cv::Vec3b kLabelColors[] = {
      {0, 0, 0}, {128, 64, 128}, {0, 128, 128}, {220, 20, 60}, {0, 0, 142},
      {250, 170, 30}, {107, 142, 35}, {70, 70, 70}};
  cv::Mat out(mask.size(), CV_8UC3);
  for (int y = 0; y < mask.rows; ++y) {
    for (int x = 0; x < mask.cols; ++x) {
      out.at<cv::Vec3b>(y, x) = kLabelColors[mask.at<uchar>(y, x) % 8];
    }
  }
  return out;
}

DatasetManifest synthesize_dataset(const fs::path& out_dir, const SynthOptions& opts) {
  for (const char* folder : kFolders) {
    fs::remove_all(out_dir / folder);
    fs::create_directories(out_dir / folder);
  }
  std::mt19937_64 rng(opts.seed);
  EdgeExtractorSpec es = opts.edges;
  es.resolution = opts.resolution;
  const int total = opts.train + opts.test;
  for (int i = 0; i < total; ++i) {
    const std::string split = i < opts.train ? "train" : "test";
    char stem[32];
    std::snprintf(stem, sizeof(stem), "scene_%05d", i);
    auto scene = render_synthetic_scene(rng, opts.resolution);
    write_rgb(out_dir / (split + "B") / (std::string(stem) + ".png"), scene.color);
    write_mask(out_dir / (split + "B") / (std::string(stem) + ".mask"), scene.mask);
    const fs::path source = out_dir / (split + "A") / (std::string(stem) + ".png");
    if (opts.task == Task::kLabel2Photo) {
      write_rgb(source, render_label_map(scene.mask));
    } else {
      auto edges = extract_edges({scene.color}, es);
      cv::imwrite(source.string(), edge_to_u8(edges[0]));
    }
  }
  auto m = DatasetManifest::scan(out_dir, "synthetic", opts.task, Layout::kPairedAB,
                                 opts.resolution);
  m.save(out_dir / kManifestFile);
  m.verify();
  return m;
}

// ---------------------------------------------------------------- loading

ImageDataset::ImageDataset(const DatasetManifest& manifest, const std::string& split)
    : task_(manifest.task),
      layout_(manifest.layout),
      source_channels_(manifest.task == Task::kSketch2Photo ? 1 : 3) {
  const auto& a = manifest.files.at(split + "A");
  const auto& b = manifest.files.at(split + "B");
  for (const auto& f : a) {
    source_.push_back(
        resize_square(read_image(manifest.root() / (split + "A") / f, source_channels_),
                      manifest.resolution));
    source_stems_.push_back(stem_of(f));
  }
  for (const auto& f : b) {
    target_.push_back(
        resize_square(read_image(manifest.root() / (split + "B") / f, 3), manifest.resolution));
    target_stems_.push_back(stem_of(f));
    cv::Mat mask = read_mask(manifest.root() / (split + "B") / (stem_of(f) + ".mask"));
    if (!mask.empty() && (mask.rows != manifest.resolution || mask.cols != manifest.resolution)) {
      cv::resize(mask, mask, cv::Size(manifest.resolution, manifest.resolution), 0, 0,
                 cv::INTER_NEAREST);
    }
    masks_.push_back(mask);
  }
}

bool ImageDataset::has_masks() const {
  return !masks_.empty() &&
         std::all_of(masks_.begin(), masks_.end(), [](const cv::Mat& m) { return !m.empty(); });
}

BatchSampler::BatchSampler(const ImageDataset& data, int batch_size, SampleMode mode)
    : data_(data), batch_size_(batch_size), mode_(mode) {
  if (batch_size < 1) throw Error(ErrorCode::kConfigInvalid, "batch_size must be >= 1");
  if (mode == SampleMode::kPaired && data.layout() != Layout::kPairedAB) {
    throw Error(ErrorCode::kLayoutModeMismatch, "paired sampling needs a paired_ab layout");
  }
  if (data.source_size() == 0 || data.target_size() == 0) {
    throw Error(ErrorCode::kEmptyResult, "dataset split is empty");
  }
}

std::size_t BatchSampler::steps_per_epoch() const {
  const std::size_t n = mode_ == SampleMode::kPaired
                            ? data_.source_size()
                            : std::max(data_.source_size(), data_.target_size());
  return (n + batch_size_ - 1) / batch_size_;
}

EpochPlan BatchSampler::plan_epoch(std::mt19937_64& rng) const {
  auto permutation = [&](std::size_t n) {
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), 0);
    std::shuffle(p.begin(), p.end(), rng);
    return p;
  };
  EpochPlan plan;
  const std::size_t steps = steps_per_epoch();
  if (mode_ == SampleMode::kPaired) {
    auto order = permutation(data_.source_size());
    for (std::size_t s = 0; s < steps; ++s) {
      auto first = order.begin() + static_cast<std::ptrdiff_t>(s * batch_size_);
      auto last = order.begin() + static_cast<std::ptrdiff_t>(
                                      std::min(order.size(), (s + 1) * batch_size_));
      plan.source.emplace_back(first, last);
      plan.target.emplace_back(first, last);
    }
    return plan;
  }
  // Each domain walks its own permutation; the smaller one restarts with a
  // fresh permutation when exhausted.
  auto draw = [&](std::size_t n, std::vector<std::vector<std::size_t>>& out) {
    auto order = permutation(n);
    std::size_t pos = 0;
    const std::size_t total = std::max(data_.source_size(), data_.target_size());
    for (std::size_t s = 0; s < steps; ++s) {
      const std::size_t len = std::min<std::size_t>(batch_size_, total - s * batch_size_);
      std::vector<std::size_t> batch;
      for (std::size_t k = 0; k < len; ++k) {
        if (pos == order.size()) {
          order = permutation(n);
          pos = 0;
        }
        batch.push_back(order[pos++]);
      }
      out.push_back(std::move(batch));
    }
  };
  draw(data_.source_size(), plan.source);
  draw(data_.target_size(), plan.target);
  return plan;
}

TranslationBatch BatchSampler::assemble(const EpochPlan& plan, std::size_t step) const {
  std::vector<torch::Tensor> xs, ys;
  std::vector<std::string> x_ids, y_ids;
  for (auto i : plan.source.at(step)) {
    xs.push_back(data_.source(i));
    x_ids.push_back(data_.source_stems()[i]);
  }
  for (auto j : plan.target.at(step)) {
    ys.push_back(data_.target(j));
    y_ids.push_back(data_.target_stems()[j]);
  }
  return TranslationBatch{ImageBatch(torch::stack(xs), data_.source_domain()),
                          ImageBatch(torch::stack(ys), Domain::kColor),
                          mode_ == SampleMode::kPaired && x_ids == y_ids, std::move(x_ids),
                          std::move(y_ids)};
}

struct EpochLoader::State {
  const BatchSampler& sampler;
  EpochPlan plan;
  int depth;
  std::size_t next_step = 0;
  std::mutex mutex;
  std::condition_variable cv;
  std::deque<TranslationBatch> ready;
  std::exception_ptr error;
  bool stop = false;
  std::thread worker;

  State(const BatchSampler& s, EpochPlan p, int d) : sampler(s), plan(std::move(p)), depth(d) {}
};

EpochLoader::EpochLoader(const BatchSampler& sampler, EpochPlan plan, int depth)
    : state_(std::make_unique<State>(sampler, std::move(plan), depth)) {
  if (depth <= 0) return;
  State* st = state_.get();
  st->worker = std::thread([st] {
    const std::size_t steps = st->plan.source.size();
    for (std::size_t s = 0; s < steps; ++s) {
      {
        std::unique_lock lock(st->mutex);
        st->cv.wait(lock, [st] {
          return st->stop || st->ready.size() < static_cast<std::size_t>(st->depth);
        });
        if (st->stop) return;
      }
      try {
        auto batch = st->sampler.assemble(st->plan, s);
        std::lock_guard lock(st->mutex);
        st->ready.push_back(std::move(batch));
      } catch (...) {
        std::lock_guard lock(st->mutex);
        st->error = std::current_exception();
        st->cv.notify_all();
        return;
      }
      st->cv.notify_all();
    }
  });
}

EpochLoader::~EpochLoader() {
  if (state_->worker.joinable()) {
    {
      std::lock_guard lock(state_->mutex);
      state_->stop = true;
    }
    state_->cv.notify_all();
    state_->worker.join();
  }
}

std::optional<TranslationBatch> EpochLoader::next() {
  State& st = *state_;
  if (st.next_step >= st.plan.source.size()) return std::nullopt;
  if (st.depth <= 0) return st.sampler.assemble(st.plan, st.next_step++);
  std::unique_lock lock(st.mutex);
  st.cv.wait(lock, [&] { return !st.ready.empty() || st.error; });
  if (st.ready.empty() && st.error) std::rethrow_exception(st.error);
  auto batch = std::move(st.ready.front());
  st.ready.pop_front();
  ++st.next_step;
  lock.unlock();
  st.cv.notify_all();
  return batch;
}

}  // namespace asl
