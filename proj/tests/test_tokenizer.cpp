#include <gtest/gtest.h>

#include <cmath>

#include "lgmae/rng.hpp"
#include "lgmae/tokenizer.hpp"

using namespace lgmae;

namespace {

VideoClip<double> random_clip(int t, int h, int w, std::uint64_t seed) {
  VideoClip<double> clip(t, h, w);
  Rng rng(seed);
  for (auto& v : clip.data) v = rng.next_double();
  return clip;
}

// Frames tagged by index so selections are checkable.
VideoClip<double> indexed_clip(int t, int h, int w) {
  VideoClip<double> clip(t, h, w);
  for (int f = 0; f < t; ++f)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < kChannels; ++c) clip.at(f, y, x, c) = f;
  return clip;
}

TEST(SampleClip, Stride4Takes16FramesFrom80) {
  const auto video = indexed_clip(80, 2, 2);
  const auto clip = sample_clip(video, 16, 4, 0);
  ASSERT_EQ(clip.frames, 16);
  for (int i = 0; i < 16; ++i) EXPECT_DOUBLE_EQ(clip.at(i, 0, 0, 0), 4.0 * i);
  EXPECT_EQ(clip.stride, 4);
}

TEST(SampleClip, IdentitySelection) {
  const auto video = random_clip(16, 4, 4, 1);
  const auto clip = sample_clip(video, 16, 1, 0);
  EXPECT_EQ(clip.data, video.data);
}

TEST(SampleClip, TooShortVideoThrows) {
  const auto video = indexed_clip(17, 2, 2);
  EXPECT_THROW(sample_clip(video, 16, 2, 0), OutOfRange);
}

TEST(CropUpperCenter, CropsUpperCenterOf224) {
  VideoClip<double> clip(1, 224, 224);
  for (int y = 0; y < 224; ++y)
    for (int x = 0; x < 224; ++x) clip.at(0, y, x, 0) = y * 1000.0 + x;
  const auto out = crop_upper_center(clip);
  ASSERT_EQ(out.height, 160);
  ASSERT_EQ(out.width, 160);
  EXPECT_DOUBLE_EQ(out.at(0, 0, 0, 0), 0.0 * 1000 + 32);
  EXPECT_DOUBLE_EQ(out.at(0, 159, 159, 0), 159.0 * 1000 + 191);
}

TEST(CropUpperCenter, IdentityWhenAlreadyCropSized) {
  const auto clip = random_clip(2, 160, 160, 2);
  const auto out = crop_upper_center(clip);
  EXPECT_EQ(out.data, clip.data);
}

TEST(CropUpperCenter, TooSmallThrows) {
  VideoClip<double> clip(1, 150, 224);
  EXPECT_THROW(crop_upper_center(clip), TooSmall);
}

TEST(CubeEmbed, PaperShapeGives8x10x10Tokens) {
  VideoClip<float> clip(16, 160, 160);
  EmbedParams<float> p(512);
  const auto grid = cube_embed(clip, p);
  EXPECT_EQ(grid.grid, (GridShape{8, 10, 10}));
  EXPECT_EQ(grid.tokens.rows, 800);
  EXPECT_EQ(grid.tokens.cols, 512);
}

TEST(CubeEmbed, SingleCube) {
  const auto clip = random_clip(2, 16, 16, 3);
  EmbedParams<double> p(8);
  Rng rng(4);
  p.init(rng);
  const auto grid = cube_embed(clip, p);
  EXPECT_EQ(grid.tokens.rows, 1);
  // Direct recomputation of the single linear projection.
  const auto patches = cube_patches(clip);
  for (int j = 0; j < 8; ++j) {
    double acc = p.bias[j];
    for (int i = 0; i < kCubeValues; ++i) acc += patches.at(0, i) * p.weight.at(i, j);
    EXPECT_NEAR(grid.tokens.at(0, j), acc, 1e-12);
  }
}

TEST(CubeEmbed, ZeroWeightsGiveZeroTokens) {
  const auto clip = random_clip(4, 32, 32, 5);
  EmbedParams<double> p(16);
  const auto grid = cube_embed(clip, p);
  for (double v : grid.tokens.data) EXPECT_EQ(v, 0.0);
}

TEST(CubeEmbed, LinearInInputWithZeroBias) {
  EmbedParams<double> p(8);
  Rng rng(6);
  p.init(rng);
  auto a = random_clip(2, 16, 32, 7);
  auto b = random_clip(2, 16, 32, 8);
  VideoClip<double> combo(2, 16, 32);
  for (size_t i = 0; i < combo.data.size(); ++i) combo.data[i] = 2.0 * a.data[i] - 3.0 * b.data[i];
  const auto ga = cube_embed(a, p), gb = cube_embed(b, p), gc = cube_embed(combo, p);
  for (size_t i = 0; i < gc.tokens.data.size(); ++i)
    EXPECT_NEAR(gc.tokens.data[i], 2.0 * ga.tokens.data[i] - 3.0 * gb.tokens.data[i], 1e-9);
}

TEST(CubeEmbed, TokenCountFormulaHolds) {
  for (auto [t, h, w] : {std::tuple{2, 16, 16}, {4, 32, 16}, {16, 160, 160}, {8, 64, 96}}) {
    VideoClip<float> clip(t, h, w);
    EmbedParams<float> p(4);
    const auto grid = cube_embed(clip, p);
    EXPECT_EQ(grid.tokens.rows, (t / 2) * (h / 16) * (w / 16));
  }
}

TEST(BuildTargets, ConstantClipHasZeroMotion) {
  VideoClip<double> clip(4, 16, 16);
  std::fill(clip.data.begin(), clip.data.end(), 0.37);
  const auto t = build_targets(clip);
  for (double v : t.motion) EXPECT_EQ(v, 0.0);
  for (double v : t.appearance) EXPECT_EQ(v, 0.37);
}

TEST(BuildTargets, ConstantDeltaMotion) {
  VideoClip<double> clip(6, 16, 16);
  for (int f = 0; f < 6; ++f)
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x)
        for (int c = 0; c < 3; ++c) clip.at(f, y, x, c) = 0.2 + 0.05 * (f % 2);
  const auto t = build_targets(clip);
  for (double v : t.motion) EXPECT_NEAR(v, 0.05, 1e-15);
}

TEST(BuildTargets, StitchingIdentityExact) {
  const auto clip = random_clip(8, 32, 16, 11);
  const auto t = build_targets(clip);
  for (int i = 0; i < t.frames; ++i)
    for (int y = 0; y < t.height; ++y)
      for (int x = 0; x < t.width; ++x)
        for (int c = 0; c < 3; ++c) {
          EXPECT_EQ(t.app_at(i, y, x, c), clip.at(2 * i, y, x, c));
          EXPECT_EQ(t.app_at(i, y, x, c) + t.mot_at(i, y, x, c), clip.at(2 * i + 1, y, x, c));
        }
}

TEST(BuildTargets, OddFrameCountThrows) {
  VideoClip<double> clip(5, 16, 16);
  EXPECT_THROW(build_targets(clip), OddFrameCount);
}

TEST(NormalizeTargets, ConstantPatchBecomesZero) {
  VideoClip<double> clip(2, 16, 16);
  std::fill(clip.data.begin(), clip.data.end(), 0.8);
  const auto t = normalize_targets(build_targets(clip), TargetNorm::kPerCube);
  for (double v : t.appearance) EXPECT_NEAR(v, 0.0, 1e-8);
  EXPECT_TRUE(t.normalized);
}

TEST(NormalizeTargets, RawModeIsIdentity) {
  const auto clip = random_clip(4, 16, 32, 12);
  const auto raw = build_targets(clip);
  const auto t = normalize_targets(raw, TargetNorm::kRaw);
  EXPECT_EQ(t.appearance, raw.appearance);
  EXPECT_EQ(t.motion, raw.motion);
  EXPECT_FALSE(t.normalized);
}

TEST(NormalizeTargets, RoundTripRecoversOriginal) {
  const auto clip = random_clip(4, 32, 32, 13);
  const auto raw = build_targets(clip);
  const auto back = denormalize_targets(normalize_targets(raw, TargetNorm::kPerCube));
  ASSERT_EQ(back.appearance.size(), raw.appearance.size());
  for (size_t i = 0; i < raw.appearance.size(); ++i)
    EXPECT_NEAR(back.appearance[i], raw.appearance[i], 1e-6);
  for (size_t i = 0; i < raw.motion.size(); ++i)
    EXPECT_NEAR(back.motion[i], raw.motion[i], 1e-6);
}

TEST(Positional, ZeroTokensBecomeTheTable) {
  TokenGrid<double> grid;
  grid.grid = {2, 3, 4};
  grid.tokens = Matrix<double>(24, 32);
  const auto out = add_positional(grid);
  const auto table = sincos_position_table<double>({2, 3, 4}, 32);
  EXPECT_EQ(out.tokens.data, table.data);
}

TEST(Positional, DeterministicForShape) {
  const auto a = sincos_position_table<double>({4, 2, 5}, 64);
  const auto b = sincos_position_table<double>({4, 2, 5}, 64);
  EXPECT_EQ(a.data, b.data);
}

TEST(Positional, RowNormsBoundedBySqrtC) {
  const int c = 48;
  const auto table = sincos_position_table<double>({3, 4, 5}, c);
  for (int i = 0; i < table.rows; ++i) {
    double norm2 = 0.0;
    for (int j = 0; j < c; ++j) norm2 += table.at(i, j) * table.at(i, j);
    EXPECT_TRUE(std::isfinite(norm2));
    EXPECT_LE(std::sqrt(norm2), std::sqrt(static_cast<double>(c)) + 1e-12);
  }
}

TEST(Patchify, AlignsWithTokenGridOrder) {
  const auto clip = random_clip(4, 32, 48, 14);
  const auto t = build_targets(clip);
  Matrix<double> app, mot;
  patchify_targets(t, app, mot);
  EXPECT_EQ(app.rows, 2 * 2 * 3);
  EXPECT_EQ(app.cols, kPatchValues);
  // Token (1, 1, 2) covers appearance frame 1, rows 16.., cols 32..
  const int k = (1 * 2 + 1) * 3 + 2;
  EXPECT_EQ(app.at(k, 0), t.app_at(1, 16, 32, 0));
  EXPECT_EQ(mot.at(k, 5), t.mot_at(1, 16, 33, 2));
}

}  // namespace
