#include <fstream>
#include <set>

#include <gtest/gtest.h>
#include <json.hpp>
#include <opencv2/imgproc.hpp>

#include "asl/datapipe.hpp"
#include "asl/error.hpp"
#include "test_util.hpp"

using namespace asl;
namespace fs = std::filesystem;

namespace {

// 10 images; ids 1, 3, 5, 7 carry "elephant", 2 and 4 "sheep".
void write_toy_store(const fs::path& dir) {
  fs::create_directories(dir / "images");
  nlohmann::json store;
  store["categories"] = {{{"id", 22}, {"name", "elephant"}}, {{"id", 20}, {"name", "sheep"}},
                         {{"id", 90}, {"name", "toothbrush"}}};
  for (int i = 0; i < 10; ++i) {
    const std::string name = "img" + std::to_string(i) + ".png";
    cv::Mat img(40, 48, CV_8UC3, cv::Scalar(20 * i, 100, 200 - 10 * i));
    cv::circle(img, {20, 20}, 8 + i, cv::Scalar(250, 250, 250), -1);
    write_rgb(dir / "images" / name, img);
    store["images"].push_back({{"id", i}, {"file_name", name}});
  }
  for (int id : {1, 3, 5, 7}) store["annotations"].push_back({{"image_id", id}, {"category_id", 22}});
  store["annotations"].push_back({{"image_id", 3}, {"category_id", 22}});
  for (int id : {2, 4}) store["annotations"].push_back({{"image_id", id}, {"category_id", 20}});
  std::ofstream(dir / "store.json") << store.dump();
}

CurateOptions curate_opts(std::uint64_t seed) {
  CurateOptions o;
  o.seed = seed;
  o.train_ratio = 0.75;
  o.resolution = 32;
  return o;
}

}  // namespace

TEST(Curate, FiltersByCategory) {
  test::TempDir dir;
  write_toy_store(dir.path());
  auto m = curate_by_category(dir / "store.json", dir / "images", "elephant", dir / "out", curate_opts(1));
  EXPECT_EQ(m.count("trainB") + m.count("testB"), 4u);
  EXPECT_EQ(m.count("trainA"), m.count("trainB"));
  EXPECT_EQ(m.count("train" "B"), 3u);
  EXPECT_EQ(m.layout, Layout::kPairedAB);
  EXPECT_NO_THROW(m.verify());
  auto again = DatasetManifest::load(dir / "out" / kManifestFile);
  EXPECT_EQ(again.files, m.files);
  auto img = read_image(dir / "out" / "trainB" / m.files.at("trainB")[0], 3);
  EXPECT_EQ(img.rows, 32);
  EXPECT_EQ(img.cols, 32);
}

TEST(Curate, DeterministicForSeed) {
  test::TempDir dir;
  write_toy_store(dir.path());
  auto a = curate_by_category(dir / "store.json", dir / "images", "elephant", dir / "a", curate_opts(5));
  auto b = curate_by_category(dir / "store.json", dir / "images", "elephant", dir / "b", curate_opts(5));
  EXPECT_EQ(a.files, b.files);
}

TEST(Curate, UnknownAndEmptyCategories) {
  test::TempDir dir;
  write_toy_store(dir.path());
  try {
    curate_by_category(dir / "store.json", dir / "images", "giraffe", dir / "o1", curate_opts(0));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kUnknownCategory);
  }
  try {
    curate_by_category(dir / "store.json", dir / "images", "toothbrush", dir / "o2", curate_opts(0));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kEmptyResult);
  }
}

TEST(Curate, SplitPresets) {
  auto sheep = find_split_preset("sheep");
  ASSERT_TRUE(sheep.has_value());
  EXPECT_EQ(sheep->train, 1300);
  EXPECT_EQ(sheep->test, 229);
  EXPECT_FALSE(find_split_preset("zebra").has_value());
}

TEST(Edges, ConstantImageHasNoEdges) {
  cv::Mat img(16, 16, CV_8UC3, cv::Scalar(90, 120, 30));
  EdgeExtractorSpec spec;
  auto e = extract_edges({img}, spec)[0];
  EXPECT_EQ(cv::countNonZero(e > 1e-6), 0);
  // xdog is flat on flat input too, though not necessarily zero
  spec.method = EdgeMethod::kXdog;
  auto x = extract_edges({img}, spec)[0];
  double lo, hi;
  cv::minMaxLoc(x, &lo, &hi);
  EXPECT_NEAR(lo, hi, 1e-6);
}

TEST(Edges, StepImageGivesSingleColumn) {
  cv::Mat img(12, 20, CV_8UC1, cv::Scalar(30));
  img.colRange(9, 20).setTo(220);
  EdgeExtractorSpec spec;
  spec.sigma = 0;
  auto e = extract_edges({img}, spec)[0];
  ASSERT_EQ(e.type(), CV_32F);
  for (int r = 0; r < e.rows; ++r) {
    for (int c = 0; c < e.cols; ++c) {
      EXPECT_FLOAT_EQ(e.at<float>(r, c), c == 8 ? 1.0f : 0.0f) << r << "," << c;
    }
  }
}

TEST(Edges, ResizeAndRange) {
  cv::Mat img(512, 512, CV_8UC3);
  cv::randu(img, 0, 255);
  EdgeExtractorSpec spec;
  spec.resolution = 256;
  spec.binarize = true;
  auto e = extract_edges({img}, spec)[0];
  EXPECT_EQ(e.rows, 256);
  EXPECT_EQ(e.cols, 256);
  double lo, hi;
  cv::minMaxLoc(e, &lo, &hi);
  EXPECT_GE(lo, 0.0);
  EXPECT_LE(hi, 1.0);
  EXPECT_EQ(cv::countNonZero((e > 0) & (e < 1)), 0);
}

TEST(Edges, HedWithoutWeights) {
  EdgeExtractorSpec spec;
  spec.method = EdgeMethod::kPretrainedHed;
  try {
    extract_edges({cv::Mat(8, 8, CV_8UC3, cv::Scalar(0))}, spec);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kMissingWeights);
  }
}

TEST(Tensorize, ExtremesMapToUnitRange) {
  cv::Mat img(2, 2, CV_8UC3, cv::Scalar(0, 255, 0));
  auto t = to_tensor(img);
  EXPECT_EQ(t.sizes(), (std::vector<int64_t>{3, 2, 2}));
  EXPECT_FLOAT_EQ(t[0][0][0].item<float>(), -1.0f);
  EXPECT_FLOAT_EQ(t[1][0][0].item<float>(), 1.0f);
  cv::Mat any(9, 7, CV_8UC1);
  cv::randu(any, 0, 256);
  auto u = to_tensor(any);
  EXPECT_GE(u.min().item<float>(), -1.0f);
  EXPECT_LE(u.max().item<float>(), 1.0f);
  cv::Mat back = to_image(u);
  EXPECT_EQ(cv::norm(back, any, cv::NORM_INF), 0.0);
}

TEST(Synthetic, DatasetWithMasks) {
  test::TempDir dir;
  auto m = test::tiny_dataset(dir.path(), 6, 3);
  EXPECT_EQ(m.count("trainA"), 6u);
  EXPECT_EQ(m.count("testB"), 3u);
  EXPECT_NO_THROW(m.verify());
  ImageDataset train(m, "train");
  EXPECT_TRUE(train.has_masks());
  EXPECT_EQ(train.source_channels(), 1);
  const cv::Mat& mask = train.target_mask(0);
  double lo, hi;
  cv::minMaxLoc(mask, &lo, &hi);
  EXPECT_GE(lo, 0);
  EXPECT_LE(hi, 4);
  // same seed, same bytes
  test::TempDir other;
  auto m2 = test::tiny_dataset(other.path(), 6, 3);
  ImageDataset t2(m2, "train");
  EXPECT_TRUE(torch::equal(train.target(2), t2.target(2)));
  EXPECT_TRUE(torch::equal(train.source(2), t2.source(2)));
}

TEST(Synthetic, LabelToPhotoSources) {
  test::TempDir dir;
  auto m = test::tiny_dataset(dir.path(), 2, 1, Task::kLabel2Photo);
  ImageDataset d(m, "train");
  EXPECT_EQ(d.source_channels(), 3);
  EXPECT_EQ(d.source_domain(), Domain::kLabelMap);
}

TEST(Manifest, VerifyDetectsMissingFile) {
  test::TempDir dir;
  auto m = test::tiny_dataset(dir.path(), 4, 2);
  fs::remove(dir / "trainA" / m.files.at("trainA")[1]);
  EXPECT_THROW(m.verify(), Error);
}

TEST(Sampler, PairedBatchesAligned) {
  test::TempDir dir;
  auto m = test::tiny_dataset(dir.path(), 4, 1);
  ImageDataset d(m, "train");
  BatchSampler s(d, 4, SampleMode::kPaired);
  std::mt19937_64 rng(1);
  auto plan = s.plan_epoch(rng);
  ASSERT_EQ(s.steps_per_epoch(), 1u);
  auto b = s.assemble(plan, 0);
  EXPECT_TRUE(b.aligned);
  EXPECT_EQ(b.source_ids, b.target_ids);
  EXPECT_EQ(b.source.size(), 4);
}

TEST(Sampler, UnpairedEpochVisitsEachFileOnce) {
  test::TempDir dir;
  auto m = test::tiny_dataset(dir.path(), 10, 1);
  ImageDataset d(m, "train");
  BatchSampler s(d, 3, SampleMode::kUnpaired);
  EXPECT_EQ(s.steps_per_epoch(), 4u);
  std::mt19937_64 rng(2);
  auto plan = s.plan_epoch(rng);
  std::multiset<std::string> seen_src, seen_tgt;
  EpochLoader loader(s, plan, 2);
  while (auto b = loader.next()) {
    EXPECT_FALSE(b->aligned);
    seen_src.insert(b->source_ids.begin(), b->source_ids.end());
    seen_tgt.insert(b->target_ids.begin(), b->target_ids.end());
  }
  EXPECT_EQ(seen_src.size(), 10u);
  EXPECT_EQ(std::set<std::string>(seen_src.begin(), seen_src.end()).size(), 10u);
  EXPECT_EQ(std::set<std::string>(seen_tgt.begin(), seen_tgt.end()).size(), 10u);
}

TEST(Sampler, PrefetchDoesNotChangeOrder) {
  test::TempDir dir;
  auto m = test::tiny_dataset(dir.path(), 9, 1);
  ImageDataset d(m, "train");
  BatchSampler s(d, 2, SampleMode::kUnpaired);
  std::mt19937_64 rng(3);
  auto plan = s.plan_epoch(rng);
  EpochLoader sync(s, plan, 0), async(s, plan, 3);
  int n = 0;
  while (auto a = sync.next()) {
    auto b = async.next();
    ASSERT_TRUE(b.has_value());
    EXPECT_EQ(a->source_ids, b->source_ids);
    EXPECT_TRUE(torch::equal(a->target.data(), b->target.data()));
    ++n;
  }
  EXPECT_FALSE(async.next().has_value());
  EXPECT_EQ(n, 5);
}

TEST(Sampler, PairedModeNeedsPairedLayout) {
  test::TempDir dir;
  auto m = test::tiny_dataset(dir.path(), 4, 1);
  m.layout = Layout::kUnpairedAB;
  ImageDataset d(m, "train");
  try {
    BatchSampler(d, 2, SampleMode::kPaired);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kLayoutModeMismatch);
  }
}
