#include <gtest/gtest.h>

#include <cmath>

#include "lgmae/optim.hpp"
#include "lgmae/pretrain.hpp"
#include "test_util.hpp"

using namespace lgmae;
using lgmae::test::fd_check;
using lgmae::test::fill_random;

namespace {

// Tiny pipeline config: grid (2,2,2), C=16, decoder 8-dim, depth 1+1.
EncoderConfig tiny_encoder() {
  EncoderConfig cfg;
  cfg.depth = 1;
  cfg.channels = 16;
  cfg.heads = 4;
  cfg.grid = {2, 2, 2};
  cfg.region = {1, 2, 2};
  return cfg;
}

DecoderConfig tiny_decoder() {
  DecoderConfig cfg;
  cfg.depth = 1;
  cfg.channels = 8;
  cfg.heads = 2;
  return cfg;
}

VideoClip<double> random_clip(int t, int h, int w, std::uint64_t seed) {
  VideoClip<double> clip(t, h, w);
  Rng rng(seed);
  for (auto& v : clip.data) v = rng.next_double();
  return clip;
}

TEST(Decode, ZeroDepthReturnsScatteredPositionedInput) {
  DecoderConfig dcfg = tiny_decoder();
  dcfg.depth = 0;
  DecoderWeights<double> w(dcfg, 16);
  w.init(1);
  const auto p = make_partition({2, 2, 2}, {1, 2, 2});
  const auto mask = sample_tube_mask(p, 0.5, 2);
  Matrix<double> visible(4, 16);
  Rng rng(3);
  fill_random(visible, rng);

  const auto out = decode(visible, mask, p, w);

  Matrix<double> z;
  matmul(visible, w.proj, z);
  add_row_inplace(z, w.proj_b);
  const auto expect = scatter_with_mask_tokens(z, mask, p, w.mask_token,
                                               sincos_position_table<double>(mask.grid, 8));
  EXPECT_EQ(out.data, expect.data);
}

TEST(Decode, SequenceCoversAllSlotsWithMaskTokens) {
  DecoderConfig dcfg;
  dcfg.channels = 8;
  dcfg.heads = 2;
  dcfg.depth = 0;
  DecoderWeights<double> w(dcfg, 4);
  for (size_t i = 0; i < w.mask_token.size(); ++i) w.mask_token[i] = 100.0 + i;
  const auto p = make_partition({8, 10, 10}, {2, 5, 10});
  const auto mask = sample_tube_mask(p, 0.9, 4);
  Matrix<double> visible(80, 4);
  visible.fill(1.0);

  const auto out = decode(visible, mask, p, w);
  ASSERT_EQ(out.rows, 800);
  const auto pos = sincos_position_table<double>(mask.grid, 8);
  int masked = 0;
  for (int i = 0; i < 800; ++i)
    if (!mask.visible[i]) {
      ++masked;
      for (int j = 0; j < 8; ++j) EXPECT_EQ(out.at(i, j), 100.0 + j + pos.at(i, j));
    }
  EXPECT_EQ(masked, 720);
}

TEST(Decode, GlobalAttentionReachesEveryPosition) {
  DecoderWeights<double> w(tiny_decoder(), 16);
  w.init(5);
  const auto p = make_partition({2, 2, 2}, {1, 2, 2});
  const auto mask = sample_tube_mask(p, 0.5, 6);
  Matrix<double> visible(4, 16);
  Rng rng(7);
  fill_random(visible, rng);

  const auto base = decode(visible, mask, p, w);
  auto perturbed = visible;
  perturbed.at(2, 3) += 0.5;
  const auto out = decode(perturbed, mask, p, w);
  for (int i = 0; i < out.rows; ++i) {
    double diff = 0.0;
    for (int j = 0; j < out.cols; ++j) diff += std::abs(out.at(i, j) - base.at(i, j));
    EXPECT_GT(diff, 0.0) << "row " << i << " unreachable";
  }
}

TEST(Predict, ZeroHeadsGiveZeroAndCorrectDims) {
  DualHeads<double> heads(8);
  Matrix<double> decoded(5, 8);
  Rng rng(8);
  fill_random(decoded, rng);
  auto out = predict(decoded, heads);
  EXPECT_EQ(out.appearance.cols, 768);
  EXPECT_EQ(out.motion.cols, 768);
  for (double v : out.appearance.data) EXPECT_EQ(v, 0.0);
  for (double v : out.motion.data) EXPECT_EQ(v, 0.0);
}

TEST(MaskedMse, PerfectPredictionIsZero) {
  const auto p = make_partition({2, 2, 2}, {1, 2, 2});
  const auto mask = sample_tube_mask(p, 0.5, 9);
  Matrix<double> pred(8, 768);
  Rng rng(10);
  fill_random(pred, rng);
  EXPECT_EQ(masked_mse(pred, pred, mask), 0.0);
}

TEST(MaskedMse, VisibleErrorsAreIgnored) {
  const auto p = make_partition({2, 2, 2}, {1, 2, 2});
  const auto mask = sample_tube_mask(p, 0.5, 11);
  Matrix<double> pred(8, 768);
  Matrix<double> target(8, 768);
  for (int i = 0; i < 8; ++i)
    if (mask.visible[i])
      for (int j = 0; j < 768; ++j) pred.at(i, j) = 99.0;
  EXPECT_EQ(masked_mse(pred, target, mask), 0.0);
}

TEST(MaskedMse, MatchesNaiveLoopOracle) {
  const auto p = make_partition({4, 2, 2}, {2, 2, 2});
  const auto mask = sample_tube_mask(p, 0.75, 12);
  Matrix<double> pred(16, 32), target(16, 32);
  Rng rng(13);
  fill_random(pred, rng);
  fill_random(target, rng);

  double sum = 0.0;
  int count = 0;
  for (int i = 0; i < 16; ++i) {
    if (mask.visible[i]) continue;
    for (int j = 0; j < 32; ++j) {
      const double d = pred.at(i, j) - target.at(i, j);
      sum += d * d;
      ++count;
    }
  }
  EXPECT_NEAR(masked_mse(pred, target, mask), sum / count, 1e-12);
}

struct PipelineFixture {
  EncoderConfig ecfg = tiny_encoder();
  DecoderConfig dcfg = tiny_decoder();
  PretrainModel<double> model{ecfg, dcfg};
  RegionPartition partition = make_partition(ecfg.grid, ecfg.region);
  TubeMask mask = sample_tube_mask(partition, 0.5, 77);
  VideoClip<double> clip = random_clip(4, 32, 32, 78);

  PipelineFixture() { model.init(99); }

  // Production init (std 0.02) leaves end-to-end gradients near the FD noise
  // floor; gradient checks re-draw all parameters at a workable scale.
  void strengthen_init(std::uint64_t seed) {
    std::vector<ParamRef<double>> ps;
    model.visit_params(ps);
    Rng rng(seed);
    for (auto& p : ps)
      for (size_t i = 0; i < p.size; ++i) p.data[i] = (rng.next_double() * 2.0 - 1.0) * 0.4;
  }
};

TEST(PretrainLoss, LambdaEndpointsAndAlgebra) {
  PipelineFixture f;
  for (double lambda : {0.0, 0.25, 0.5, 0.75, 1.0}) {
    const auto r = pretrain_forward(f.model, f.clip, f.partition, f.mask, lambda, TargetNorm::kPerCube);
    EXPECT_EQ(r.total, lambda * r.appearance_mse + (1.0 - lambda) * r.motion_mse);
    if (lambda == 1.0) EXPECT_EQ(r.total, r.appearance_mse);
    if (lambda == 0.0) EXPECT_EQ(r.total, r.motion_mse);
    if (lambda == 0.5)
      EXPECT_NEAR(r.total, 0.5 * (r.appearance_mse + r.motion_mse), 1e-15);
  }
}

TEST(PretrainLoss, DerivativeInLambdaIsBranchDifference) {
  PipelineFixture f;
  const auto a = pretrain_forward(f.model, f.clip, f.partition, f.mask, 0.3, TargetNorm::kPerCube);
  const auto b = pretrain_forward(f.model, f.clip, f.partition, f.mask, 0.7, TargetNorm::kPerCube);
  const double slope = (b.total - a.total) / 0.4;
  EXPECT_NEAR(slope, a.appearance_mse - a.motion_mse, 1e-9);
  EXPECT_NEAR(a.appearance_mse, b.appearance_mse, 1e-15);  // branches independent of lambda
}

TEST(PretrainLoss, VisibleTargetPerturbationLeavesLossBitIdentical) {
  PipelineFixture f;
  PretrainCache<double> cache;
  pretrain_forward(f.model, f.clip, f.partition, f.mask, 0.5, TargetNorm::kPerCube, &cache);

  const double base_a = masked_mse(cache.predictions.appearance, cache.app_target, f.mask);
  auto tampered = cache.app_target;
  int changed = 0;
  for (int i = 0; i < tampered.rows; ++i)
    if (f.mask.visible[i]) {
      for (int j = 0; j < tampered.cols; ++j) tampered.at(i, j) += 3.5;
      ++changed;
    }
  ASSERT_GT(changed, 0);
  EXPECT_EQ(masked_mse(cache.predictions.appearance, tampered, f.mask), base_a);

  // A masked-position target perturbation must move the loss.
  auto masked_tamper = cache.app_target;
  for (int i = 0; i < masked_tamper.rows; ++i)
    if (!f.mask.visible[i]) {
      masked_tamper.at(i, 0) += 1.0;
      break;
    }
  EXPECT_NE(masked_mse(cache.predictions.appearance, masked_tamper, f.mask), base_a);
}

TEST(PretrainLoss, FullPipelineGradientMatchesFiniteDifferences) {
  PipelineFixture f;
  f.strengthen_init(101);
  const double lambda = 0.4;

  const auto loss = [&]() {
    return pretrain_forward(f.model, f.clip, f.partition, f.mask, lambda, TargetNorm::kPerCube).total;
  };

  PretrainCache<double> cache;
  pretrain_forward(f.model, f.clip, f.partition, f.mask, lambda, TargetNorm::kPerCube, &cache);
  PretrainModel<double> grads(f.ecfg, f.dcfg);
  grads.zero();
  pretrain_backward(cache, f.model, grads, lambda);

  std::vector<ParamRef<double>> params, grad_refs;
  f.model.visit_params(params);
  grads.visit_params(grad_refs);
  ASSERT_EQ(params.size(), grad_refs.size());
  const auto res = fd_check(params, grad_refs, loss, 1e-5, 37);
  EXPECT_LT(res.max_rel, 1e-4) << "checked " << res.checked;
}

TEST(Stitch, PerfectRawPredictionsRecoverClipExactly) {
  const auto clip = random_clip(4, 32, 32, 20);
  const auto targets = build_targets(clip);
  Matrix<double> app, mot;
  patchify_targets(targets, app, mot);
  const auto p = make_partition({2, 2, 2}, {1, 2, 2});
  const auto mask = sample_tube_mask(p, 0.5, 21);
  const auto out = stitch_reconstruction(app, mot, targets, mask, false);
  ASSERT_EQ(out.data.size(), clip.data.size());
  for (size_t i = 0; i < clip.data.size(); ++i) EXPECT_EQ(out.data[i], clip.data[i]);
}

TEST(Stitch, ZeroMotionDuplicatesFramePairs) {
  const auto clip = random_clip(4, 16, 16, 22);
  const auto targets = build_targets(clip);
  Matrix<double> app, mot;
  patchify_targets(targets, app, mot);
  mot.zero();
  TubeMask all_masked;
  all_masked.grid = {2, 1, 1};
  all_masked.rho = 0.5;
  all_masked.visible.assign(2, 0);
  const auto out = stitch_reconstruction(app, mot, targets, all_masked, false);
  for (int t = 0; t < 2; ++t)
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x)
        for (int c = 0; c < 3; ++c)
          EXPECT_EQ(out.at(2 * t, y, x, c), out.at(2 * t + 1, y, x, c));
}

TEST(Stitch, NormalizedRoundTripWithin1e5) {
  const auto clip = random_clip(4, 32, 32, 24);
  const auto targets = normalize_targets(build_targets(clip), TargetNorm::kPerCube);
  Matrix<double> app, mot;
  patchify_targets(targets, app, mot);  // normalized-space "perfect predictions"
  const auto p = make_partition({2, 2, 2}, {1, 2, 2});
  const auto mask = sample_tube_mask(p, 0.5, 25);
  const auto out = stitch_reconstruction(app, mot, targets, mask, true);
  for (size_t i = 0; i < clip.data.size(); ++i) EXPECT_NEAR(out.data[i], clip.data[i], 1e-5);
}

TEST(Schedule, WarmupAndScaling) {
  LrSchedule s;
  s.base_lr = 3e-4;
  s.batch_size = 256;
  s.warmup_steps = 100;
  s.total_steps = 1000;
  EXPECT_EQ(s.at(0), 0.0);  // linear warmup from 0
  EXPECT_NEAR(s.peak(), 3e-4, 1e-18);
  EXPECT_NEAR(s.at(100), 3e-4, 1e-10);
  EXPECT_NEAR(s.at(1000), 0.0, 1e-12);

  LrSchedule half = s;
  half.batch_size = 128;
  EXPECT_NEAR(half.peak(), 1.5e-4, 1e-18);
}

TEST(AdamW, ZeroGradientsOnlyDecayWeights) {
  Matrix<double> w(2, 3);
  w.fill(1.0);
  Matrix<double> g(2, 3);
  std::vector<ParamRef<double>> params, grads;
  add_param(params, "w", w);
  add_param(grads, "w", g);

  AdamW<double> opt;
  opt.weight_decay = 0.1;
  opt.init(params);
  opt.step(params, grads, 0.5);
  for (double v : w.data) EXPECT_NEAR(v, 1.0 - 0.5 * 0.1 * 1.0, 1e-12);
}

TEST(AdamW, ConvergesOnQuadratic) {
  Matrix<double> w(1, 1);
  w.at(0, 0) = 0.0;
  Matrix<double> g(1, 1);
  std::vector<ParamRef<double>> params, grads;
  add_param(params, "w", w);
  add_param(grads, "w", g);
  AdamW<double> opt;
  opt.weight_decay = 0.0;
  opt.init(params);
  for (int i = 0; i < 2000; ++i) {
    g.at(0, 0) = 2.0 * (w.at(0, 0) - 3.0);
    opt.step(params, grads, 0.05);
  }
  EXPECT_NEAR(w.at(0, 0), 3.0, 1e-3);
}

}  // namespace
