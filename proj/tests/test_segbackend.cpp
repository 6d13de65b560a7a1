#include <fstream>

#include <gtest/gtest.h>

#include "asl/error.hpp"
#include "asl/segbackend.hpp"
#include "test_util.hpp"

using namespace asl;

namespace {

std::unique_ptr<SegBackend> stub() {
  return std::make_unique<StubSegBackend>(synthetic_palette(), synthetic_foreground_ids(), 0.05);
}

torch::Tensor random_images(int n, int h, std::uint64_t seed) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  return at::rand({n, 3, h, h}, gen) * 2 - 1;
}

}  // namespace

TEST(SegBackend, ConstantLogitsGiveUniformScores) {
  auto b = StubSegBackend::constant(5, {3, 4});
  auto map = b->segment_multiclass(ImageBatch(torch::zeros({2, 3, 8, 8}), Domain::kColor));
  EXPECT_TRUE(torch::allclose(map.scores, torch::full_like(map.scores, 0.2)));
}

TEST(SegBackend, ScoresSumToOne) {
  auto b = stub();
  auto map = b->segment_multiclass(ImageBatch(random_images(3, 12, 1), Domain::kColor));
  EXPECT_EQ(map.scores.sizes(), (std::vector<int64_t>{3, 5, 12, 12}));
  EXPECT_LT((map.scores.sum(1) - 1).abs().max().item<double>(), 1e-5);
  EXPECT_GE(map.scores.min().item<double>(), 0.0);
}

TEST(SegBackend, StubRecoversGeneratingMask) {
  // left half grass, right half box, with mild noise
  auto pal = synthetic_palette();
  auto img = torch::empty({1, 3, 16, 16});
  img.slice(3, 0, 8).copy_(pal[1].view({1, 3, 1, 1}).expand({1, 3, 16, 8}));
  img.slice(3, 8, 16).copy_(pal[3].view({1, 3, 1, 1}).expand({1, 3, 16, 8}));
  auto gen = at::make_generator<at::CPUGeneratorImpl>(9);
  img = (img + 0.03 * at::randn(img.sizes(), gen)).clamp(-1, 1);
  auto mask = torch::full({1, 16, 16}, 1, torch::kInt64);
  mask.slice(2, 8, 16).fill_(3);
  auto b = stub();
  auto labels = b->segment_multiclass(ImageBatch(img, Domain::kColor)).scores.argmax(1);
  const double agree = labels.eq(mask).to(torch::kFloat64).mean().item<double>();
  EXPECT_GE(agree, 0.99);
}

TEST(SegBackend, RejectsNonColorInput) {
  auto b = stub();
  try {
    b->segment_multiclass(ImageBatch(torch::zeros({1, 1, 8, 8}), Domain::kSketch));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kKindMismatch);
  }
}

TEST(SegBackend, ParametersFrozenButInputGetsGradient) {
  auto b = stub();
  for (const auto& p : b->parameters()) EXPECT_FALSE(p.requires_grad());
  auto x = (random_images(1, 8, 2) * 0.9).requires_grad_(true);
  auto map = b->segment_multiclass(ImageBatch(x, Domain::kColor));
  map.scores.select(1, 3).sum().backward();
  EXPECT_GT(x.grad().abs().sum().item<double>(), 0.0);
  EXPECT_EQ(b->gradient_abs_sum(), 0.0);
}

TEST(SegBackend, ForegroundMustBeStrictSubset) {
  try {
    StubSegBackend(synthetic_palette(), {}, 0.05);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kEmptyForegroundSet);
  }
  EXPECT_THROW(StubSegBackend(synthetic_palette(), {0, 1, 2, 3, 4}, 0.05), Error);
  EXPECT_THROW(StubSegBackend(synthetic_palette(), {7}, 0.05), Error);
}

TEST(SegBackend, TorchScriptMissingWeights) {
  try {
    TorchScriptSegBackend("/nonexistent/model.pt", 133, {0});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kMissingWeights);
  }
  NetworkConfig cfg;
  cfg.seg_backend = BackendKind::kPretrained;
  EXPECT_THROW(make_seg_backend(cfg), Error);
}

TEST(CollapseToBinary, OneHotExample) {
  // person (id 0) at (0,0), grass (id 1) at (0,1)
  auto s = torch::zeros({1, 3, 1, 2});
  s[0][0][0][0] = 1;
  s[0][1][0][1] = 1;
  auto bin = collapse_to_binary({s, MapKind::kMulticlass}, {0});
  EXPECT_EQ(bin.kind, MapKind::kBinary);
  EXPECT_EQ(bin.scores[0][1][0][0].item<float>(), 1.0f);
  EXPECT_EQ(bin.scores[0][0][0][0].item<float>(), 0.0f);
  EXPECT_EQ(bin.scores[0][0][0][1].item<float>(), 1.0f);
  EXPECT_EQ(bin.scores[0][1][0][1].item<float>(), 0.0f);
}

TEST(CollapseToBinary, UniformScores) {
  auto s = torch::full({2, 10, 3, 3}, 0.1);
  auto bin = collapse_to_binary({s, MapKind::kMulticlass}, {1, 4, 6, 9});
  EXPECT_TRUE(torch::allclose(bin.scores.select(1, 1), torch::full({2, 3, 3}, 0.4)));
  EXPECT_TRUE(torch::allclose(bin.scores.select(1, 0), torch::full({2, 3, 3}, 0.6)));
}

TEST(CollapseToBinary, MatchesPerPixelSummation) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(4);
  auto s = torch::softmax(at::randn({2, 10, 5, 5}, gen, torch::kFloat64), 1);
  const std::vector<int> fg = {0, 2, 5, 7};
  auto bin = collapse_to_binary({s, MapKind::kMulticlass}, fg);
  auto acc = s.accessor<double, 4>();
  auto out = bin.scores.accessor<double, 4>();
  for (int n = 0; n < 2; ++n) {
    for (int y = 0; y < 5; ++y) {
      for (int x = 0; x < 5; ++x) {
        double f = 0, b = 0;
        for (int k = 0; k < 10; ++k) {
          if (std::find(fg.begin(), fg.end(), k) != fg.end()) f += acc[n][k][y][x];
          else b += acc[n][k][y][x];
        }
        EXPECT_NEAR(out[n][1][y][x], f, 1e-12);
        EXPECT_NEAR(out[n][0][y][x], b, 1e-12);
      }
    }
  }
}

TEST(SegCache, SecondLookupIsHitWithIdenticalBytes) {
  test::TempDir dir;
  auto b = stub();
  SegCache cache(dir.path(), *b);
  ImageBatch img(random_images(1, 8, 3), Domain::kColor);
  auto first = cache.segment_cached(img);
  EXPECT_FALSE(first.hits[0]);
  auto second = cache.segment_cached(img);
  EXPECT_TRUE(second.hits[0]);
  EXPECT_TRUE(torch::equal(first.multiclass.scores, second.multiclass.scores));
  const auto key = cache.image_key(img.data()[0]);
  EXPECT_TRUE(std::filesystem::exists(cache.entry_path(key)));

  // a fresh cache on the same directory reads the disk entry
  SegCache again(dir.path(), *b);
  auto third = again.segment_cached(img);
  EXPECT_TRUE(third.hits[0]);
  EXPECT_TRUE(torch::equal(first.multiclass.scores, third.multiclass.scores));
  EXPECT_EQ(b->forward_count(), 1);
}

TEST(SegCache, PerturbedPixelMisses) {
  test::TempDir dir;
  auto b = stub();
  SegCache cache(dir.path(), *b);
  auto x = random_images(1, 8, 5);
  auto y = x.clone();
  y[0][0][3][3] = y[0][0][3][3].item<float>() * 0.5f;
  EXPECT_NE(cache.image_key(x[0]), cache.image_key(y[0]));
  cache.segment_cached(ImageBatch(x, Domain::kColor));
  auto r = cache.segment_cached(ImageBatch(y, Domain::kColor));
  EXPECT_FALSE(r.hits[0]);
}

TEST(SegCache, SixtyFourImagesTwoEpochsSixtyFourForwards) {
  test::TempDir dir;
  auto b = stub();
  SegCache cache(dir.path(), *b);
  auto imgs = random_images(64, 8, 6);
  for (int epoch = 0; epoch < 2; ++epoch) {
    for (int i = 0; i < 64; i += 8) {
      cache.segment_cached(ImageBatch(imgs.slice(0, i, i + 8), Domain::kColor));
    }
  }
  EXPECT_EQ(b->forward_count(), 64);
  EXPECT_EQ(cache.hits(), 64);
  EXPECT_EQ(cache.misses(), 64);
}

TEST(SegCache, CorruptEntryRecomputed) {
  test::TempDir dir;
  auto b = stub();
  ImageBatch img(random_images(1, 8, 7), Domain::kColor);
  torch::Tensor good;
  std::filesystem::path entry;
  {
    SegCache cache(dir.path(), *b);
    good = cache.segment_cached(img).multiclass.scores;
    entry = cache.entry_path(cache.image_key(img.data()[0]));
  }
  {
    std::ofstream f(entry, std::ios::binary | std::ios::trunc);
    f << "ASLSEG1 truncated";
  }
  EXPECT_THROW(SegCache::read_entry(entry), Error);
  SegCache cache(dir.path(), *b);
  auto r = cache.segment_cached(img);
  EXPECT_FALSE(r.hits[0]);
  EXPECT_EQ(cache.corrupt_recoveries(), 1);
  EXPECT_TRUE(torch::equal(r.multiclass.scores, good));
  EXPECT_TRUE(torch::equal(SegCache::read_entry(entry), good[0]));
}

TEST(SegCache, EntryFormatRoundTrip) {
  test::TempDir dir;
  auto t = torch::rand({5, 3, 4});
  SegCache::write_entry(dir / "x.segmap", t);
  EXPECT_TRUE(torch::equal(SegCache::read_entry(dir / "x.segmap"), t));
  EXPECT_FALSE(SegCache::read_entry(dir / "missing.segmap").defined());
  EXPECT_EQ(std::filesystem::file_size(dir / "x.segmap"), 7 + 12 + 5 * 3 * 4 * 4u);
}
