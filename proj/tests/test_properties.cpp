// Randomized checks over many draws.
#include <random>

#include <gtest/gtest.h>

#include "asl/evaluation.hpp"
#include "asl/networks.hpp"
#include "asl/objectives.hpp"
#include "asl/segbackend.hpp"
#include "test_util.hpp"

using namespace asl;

namespace {

LossFragment scalar(double v) { return {torch::tensor(v, torch::kFloat64), {}}; }

double brute_miou(const torch::Tensor& pred, const torch::Tensor& gt, int k) {
  auto p = pred.reshape(-1).to(torch::kInt64);
  auto g = gt.reshape(-1).to(torch::kInt64);
  double sum = 0;
  int present = 0;
  for (int c = 0; c < k; ++c) {
    std::int64_t inter = 0, uni = 0;
    for (int64_t i = 0; i < p.numel(); ++i) {
      const bool a = p[i].item<int64_t>() == c, b = g[i].item<int64_t>() == c;
      inter += a && b;
      uni += a || b;
    }
    if (uni > 0) {
      sum += static_cast<double>(inter) / uni;
      ++present;
    }
  }
  return present ? sum / present : 0.0;
}

}  // namespace

TEST(Property, ObjectiveAlgebra) {
  std::mt19937_64 rng(123);
  std::uniform_real_distribution<double> val(0.0, 10.0), w(0.01, 10.0);
  for (int i = 0; i < 300; ++i) {
    const double lg = val(rng), lb = val(rng), lm = val(rng);
    const double wg = w(rng), wb = w(rng), wm = w(rng);
    Fragments fr{scalar(lg), scalar(lb), scalar(lm)};
    auto comb = ObjectiveConfig::for_variant(Variant::kCombined, Baseline::kPaired);
    comb.w_g = wg;
    comb.w_b = wb;
    comb.w_m = wm;
    auto bin = comb;
    bin.variant = Variant::kBinary;
    bin.w_m = 0;
    auto base = comb;
    base.variant = Variant::kBaseline;
    base.w_b = base.w_m = 0;
    const double t = total_objective(comb, fr, Side::kGenerator).breakdown.total;
    EXPECT_NEAR(t, wg * lg + wb * lb + wm * lm, 1e-9);
    EXPECT_NEAR(t - total_objective(bin, fr, Side::kGenerator).breakdown.total, wm * lm, 1e-9);
    EXPECT_NEAR(total_objective(base, fr, Side::kGenerator).breakdown.total, wg * lg, 1e-9);
    // scaling every weight scales the total
    auto twice = comb;
    twice.w_g *= 2;
    twice.w_b *= 2;
    twice.w_m *= 2;
    EXPECT_NEAR(total_objective(twice, fr, Side::kGenerator).breakdown.total, 2 * t, 1e-9);
  }
}

TEST(Property, BinaryCollapsePreservesMass) {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 50; ++i) {
    const int k = 2 + static_cast<int>(rng() % 9);
    std::vector<int> fg;
    for (int c = 0; c < k; ++c) if (rng() % 2) fg.push_back(c);
    if (fg.empty()) fg.push_back(0);
    if (static_cast<int>(fg.size()) == k) fg.pop_back();
    auto gen = at::make_generator<at::CPUGeneratorImpl>(rng());
    auto s = torch::softmax(at::randn({2, k, 4, 4}, gen, torch::kFloat64), 1);
    auto bin = collapse_to_binary({s, MapKind::kMulticlass}, fg);
    EXPECT_NO_THROW(bin.check_normalized(1e-9));
    auto idx = torch::tensor(std::vector<int64_t>(fg.begin(), fg.end()));
    EXPECT_TRUE(torch::allclose(bin.scores.select(1, 1), s.index_select(1, idx).sum(1)));
  }
}

TEST(Property, MiouMatchesBruteForce) {
  std::mt19937_64 rng(99);
  for (int i = 0; i < 100; ++i) {
    const int k = 1 + static_cast<int>(rng() % 5);
    auto gen = at::make_generator<at::CPUGeneratorImpl>(rng());
    auto pred = at::randint(0, k, {8, 8}, gen, torch::kInt64);
    auto gt = at::randint(0, k, {8, 8}, gen, torch::kInt64);
    EXPECT_DOUBLE_EQ(miou(pred, gt, k).mean, brute_miou(pred, gt, k));
  }
}

TEST(Property, ConfusionMatrixIsAdditive) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(5);
  auto p1 = at::randint(0, 4, {3, 5, 5}, gen, torch::kInt64);
  auto g1 = at::randint(0, 4, {3, 5, 5}, gen, torch::kInt64);
  auto p2 = at::randint(0, 4, {2, 5, 5}, gen, torch::kInt64);
  auto g2 = at::randint(0, 4, {2, 5, 5}, gen, torch::kInt64);
  ConfusionMatrix a(4), b(4), all(4);
  a.add(p1, g1);
  b.add(p2, g2);
  all.add(torch::cat({p1, p2}), torch::cat({g1, g2}));
  a += b;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) EXPECT_EQ(a.at(i, j), all.at(i, j));
}

TEST(Property, FrechetSymmetricNonNegative) {
  std::mt19937_64 rng(17);
  for (int i = 0; i < 30; ++i) {
    const int d = 2 + static_cast<int>(rng() % 6);
    auto draw = [&](std::uint64_t seed) {
      std::mt19937_64 r(seed);
      std::normal_distribution<double> n(0, 1);
      Eigen::MatrixXd f(20, d);
      for (int a = 0; a < 20; ++a) for (int b = 0; b < d; ++b) f(a, b) = n(r) * (1 + b);
      return FeatureStats::from_features(f, "p");
    };
    auto a = draw(rng()), b = draw(rng());
    const double ab = frechet_distance(a, b), ba = frechet_distance(b, a);
    EXPECT_GE(ab, 0.0);
    EXPECT_NEAR(ab, ba, 1e-8 * std::max(1.0, ab));
    EXPECT_NEAR(frechet_distance(a, a), 0.0, 1e-8);
  }
}

TEST(Property, CheckpointRoundTripRandomTensors) {
  test::TempDir dir;
  std::mt19937_64 rng(3);
  for (int i = 0; i < 10; ++i) {
    Checkpoint ck;
    ck.epoch = static_cast<int>(rng() % 100);
    ck.config_text = "k = " + std::to_string(rng());
    const int n = 1 + static_cast<int>(rng() % 5);
    for (int t = 0; t < n; ++t) {
      auto gen = at::make_generator<at::CPUGeneratorImpl>(rng());
      std::vector<int64_t> shape;
      for (int r = 0; r < static_cast<int>(rng() % 4); ++r) shape.push_back(1 + rng() % 4);
      auto dtype = t % 3 == 0 ? torch::kFloat32 : t % 3 == 1 ? torch::kFloat64 : torch::kInt64;
      ck.tensors["X/t" + std::to_string(t)] = (at::rand(shape, gen) * 100).to(dtype);
    }
    const auto path = (dir / "p.ckpt").string();
    ck.save(path);
    auto back = Checkpoint::load(path);
    EXPECT_EQ(back.epoch, ck.epoch);
    EXPECT_EQ(back.config_text, ck.config_text);
    for (const auto& [k, v] : ck.tensors) {
      ASSERT_TRUE(back.tensors.count(k));
      EXPECT_EQ(back.tensors.at(k).dtype(), v.dtype());
      EXPECT_TRUE(torch::equal(back.tensors.at(k), v));
    }
  }
}

TEST(Property, ConfigRoundTripRandomValues) {
  std::mt19937_64 rng(8);
  const char* variants[] = {"multiclass", "binary", "combined", "baseline"};
  for (int i = 0; i < 40; ++i) {
    Config c;
    c.set("variant", variants[rng() % 4]);
    c.set("baseline", rng() % 2 ? "paired" : "unpaired");
    c.set("learning_rate", format_double(std::ldexp(static_cast<double>(rng() % 1000 + 1), -17)));
    c.set("seed", std::to_string(rng()));
    c.set("lambda_cyc", format_double(static_cast<double>(rng() % 10000) / 7.0));
    c.set("generator_width", std::to_string(1 + rng() % 128));
    auto v = validate_config(c);
    ASSERT_TRUE(v.ok());
    const auto text = v.config->serialize();
    auto back = Config::parse(text);
    EXPECT_EQ(back.serialize(), text);
    EXPECT_EQ(back.run.seed, v.config->run.seed);
    EXPECT_EQ(back.objective.lambda_cyc, v.config->objective.lambda_cyc);
  }
}
