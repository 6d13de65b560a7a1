#include <fstream>

#include <gtest/gtest.h>

#include "asl/error.hpp"
#include "asl/networks.hpp"
#include "test_util.hpp"

using namespace asl;

TEST(Generator, UnetShapeContract) {
  GeneratorSpec s;
  s.arch = GeneratorArch::kUnet;
  s.in_channels = 1;
  s.base_width = 2;
  s.depth = 8;
  auto g = build_generator(s, 0);
  torch::NoGradGuard ng;
  auto y = g->forward(torch::zeros({1, 1, 256, 256}));
  EXPECT_EQ(y.sizes(), (std::vector<int64_t>{1, 3, 256, 256}));
  EXPECT_LE(y.abs().max().item<double>(), 1.0);
}

TEST(Generator, ResnetShapeContract) {
  GeneratorSpec s;
  s.in_channels = 3;
  s.out_channels = 1;
  s.base_width = 4;
  s.n_blocks = 2;
  auto g = build_generator(s, 0);
  torch::NoGradGuard ng;
  EXPECT_EQ(g->forward(torch::zeros({2, 3, 32, 32})).sizes(),
            (std::vector<int64_t>{2, 1, 32, 32}));
}

TEST(Generator, SameSpecAndSeedSameChecksum) {
  GeneratorSpec s;
  s.base_width = 4;
  s.n_blocks = 2;
  EXPECT_EQ(parameter_checksum(*build_generator(s, 42)), parameter_checksum(*build_generator(s, 42)));
  EXPECT_NE(parameter_checksum(*build_generator(s, 42)), parameter_checksum(*build_generator(s, 43)));
}

TEST(Generator, BlockCountDeltaIsAnalytic) {
  GeneratorSpec s;
  s.base_width = 8;
  s.n_blocks = 6;
  const auto six = parameter_count(*build_generator(s, 0));
  s.n_blocks = 9;
  const auto nine = parameter_count(*build_generator(s, 0));
  // two bias-free 3x3 convs at 4w channels plus two affine-free norms
  const std::int64_t c = 4 * 8;
  EXPECT_EQ(resnet_block_parameter_count(8), 2 * 9 * c * c);
  EXPECT_EQ(nine - six, 3 * resnet_block_parameter_count(8));
}

TEST(Generator, InitStatistics) {
  GeneratorSpec s;
  s.base_width = 16;
  s.n_blocks = 3;
  auto g = build_generator(s, 1);
  for (const auto& item : g->named_parameters()) {
    if (item.key().ends_with("bias")) {
      EXPECT_EQ(item.value().abs().max().item<double>(), 0.0);
    } else if (item.value().numel() > 1000) {
      EXPECT_NEAR(item.value().std().item<double>(), 0.02, 0.002) << item.key();
    }
  }
}

TEST(Generator, UnsupportedArch) {
  GeneratorSpec s;
  s.arch = static_cast<GeneratorArch>(99);
  try {
    build_generator(s, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kUnsupportedArch);
  }
}

TEST(Discriminator, PatchOutputSize) {
  EXPECT_EQ(patch_output_size(256, 3), 30);
  EXPECT_EQ(patch_output_size(64, 3), 6);
  DiscriminatorSpec s;
  s.base_width = 4;
  auto d = build_discriminator(s, 0);
  torch::NoGradGuard ng;
  EXPECT_EQ(d->forward(torch::zeros({1, 3, 256, 256})).sizes(),
            (std::vector<int64_t>{1, 1, 30, 30}));
}

TEST(Discriminator, SegBinaryAcceptsOnlyBinaryMaps) {
  DiscriminatorSpec s;
  s.kind = DiscriminatorKind::kSegBinary;
  s.in_channels = 2;
  s.base_width = 4;
  s.n_layers = 2;
  auto d = build_discriminator(s, 0);
  torch::NoGradGuard ng;
  EXPECT_NO_THROW(d->forward(SegmentationMap{torch::full({1, 2, 16, 16}, 0.5), MapKind::kBinary}));
  EXPECT_THROW(d->forward(SegmentationMap{torch::full({1, 2, 16, 16}, 0.5), MapKind::kMulticlass}),
               Error);
  try {
    d->forward(torch::zeros({1, 5, 16, 16}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kChannelMismatch);
  }
}

TEST(Discriminator, ConditionalAcceptsSketchPlusColor) {
  DiscriminatorSpec s;
  s.in_channels = 4;
  s.base_width = 4;
  auto d = build_discriminator(s, 0);
  torch::NoGradGuard ng;
  auto in = torch::cat({torch::zeros({1, 1, 64, 64}), torch::zeros({1, 3, 64, 64})}, 1);
  EXPECT_EQ(d->forward(in).size(1), 1);
}

TEST(Checkpoint, RoundTripAndCorruption) {
  test::TempDir dir;
  GeneratorSpec s;
  s.base_width = 4;
  s.n_blocks = 1;
  auto g = build_generator(s, 3);
  Checkpoint ck;
  ck.config_text = "[run]\nseed = 1\n";
  ck.epoch = 4;
  ck.global_step = 99;
  ck.rng_state = "state";
  ck.put_module(role::kG, *g);
  ck.tensors["opt/G/0/step"] = torch::tensor(int64_t{5});
  ck.tensors["opt/G/0/exp_avg"] = torch::rand({3}, torch::kFloat64);
  const auto path = (dir / "a.ckpt").string();
  ck.save(path);

  auto back = Checkpoint::load(path);
  EXPECT_EQ(back.config_text, ck.config_text);
  EXPECT_EQ(back.epoch, 4);
  EXPECT_EQ(back.global_step, 99);
  EXPECT_EQ(back.rng_state, "state");
  EXPECT_TRUE(back.has_role(role::kG));
  EXPECT_FALSE(back.has_role(role::kD));
  ASSERT_EQ(back.tensors.size(), ck.tensors.size());
  for (const auto& [k, t] : ck.tensors) EXPECT_TRUE(torch::equal(back.tensors.at(k), t)) << k;
  auto g2 = build_generator(s, 8);
  back.load_module(role::kG, *g2);
  EXPECT_EQ(parameter_checksum(*g2), parameter_checksum(*g));

  // saving again is byte-identical
  back.save((dir / "b.ckpt").string());
  std::ifstream fa(path, std::ios::binary), fb(dir / "b.ckpt", std::ios::binary);
  std::string sa((std::istreambuf_iterator<char>(fa)), {}), sb((std::istreambuf_iterator<char>(fb)), {});
  EXPECT_EQ(sa, sb);

  {
    std::ofstream f(dir / "bad.ckpt", std::ios::binary);
    f << sa.substr(0, sa.size() / 2);
  }
  try {
    Checkpoint::load((dir / "bad.ckpt").string());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kCheckpointCorrupt);
  }
  try {
    Checkpoint::load((dir / "none.ckpt").string());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kMissingGeneratorRole);
  }
}

TEST(Checkpoint, LoadModuleShapeMismatch) {
  GeneratorSpec s;
  s.base_width = 4;
  s.n_blocks = 1;
  Checkpoint ck;
  ck.put_module(role::kG, *build_generator(s, 0));
  s.base_width = 8;
  auto other = build_generator(s, 0);
  EXPECT_THROW(ck.load_module(role::kG, *other), Error);
}
