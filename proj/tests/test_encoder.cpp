#include <gtest/gtest.h>

#include <cmath>

#include "lgmae/encoder.hpp"
#include "test_util.hpp"

using namespace lgmae;
using lgmae::test::fd_check;
using lgmae::test::fill_random;

namespace {

constexpr int kC = 16;
constexpr int kHeads = 4;

EncoderConfig tiny_test_config(int depth = 2) {
  EncoderConfig cfg;
  cfg.depth = depth;
  cfg.channels = kC;
  cfg.heads = kHeads;
  cfg.grid = {2, 2, 2};
  cfg.region = {1, 2, 2};
  return cfg;
}

Matrix<double> random_rows(int n, int c, std::uint64_t seed, double scale = 1.0) {
  Matrix<double> m(n, c);
  Rng rng(seed);
  fill_random(m, rng, scale);
  return m;
}

AttentionParams<double> random_attention(std::uint64_t seed) {
  AttentionParams<double> p(kC, kHeads);
  Rng rng(seed);
  p.init(rng, 0.3);
  fill_random(p.b_q, rng, 0.1);
  fill_random(p.b_k, rng, 0.1);
  fill_random(p.b_v, rng, 0.1);
  fill_random(p.b_o, rng, 0.1);
  return p;
}

// Naive scaled-dot-product attention over a handful of tokens, written with
// plain loops as an independent oracle.
Matrix<double> naive_mhsa(const Matrix<double>& x, const AttentionParams<double>& p) {
  const int n = x.rows, c = x.cols, h = p.heads, d = c / h;
  auto project = [&](const Matrix<double>& w, const std::vector<double>& b) {
    Matrix<double> out(n, c);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < c; ++j) {
        double acc = b[j];
        for (int k = 0; k < c; ++k) acc += x.at(i, k) * w.at(k, j);
        out.at(i, j) = acc;
      }
    return out;
  };
  const auto q = project(p.w_q, p.b_q), k = project(p.w_k, p.b_k), v = project(p.w_v, p.b_v);
  Matrix<double> heads(n, c);
  for (int head = 0; head < h; ++head)
    for (int i = 0; i < n; ++i) {
      std::vector<double> scores(n);
      for (int j = 0; j < n; ++j) {
        double s = 0.0;
        for (int t = 0; t < d; ++t) s += q.at(i, head * d + t) * k.at(j, head * d + t);
        scores[j] = s / std::sqrt(static_cast<double>(d));
      }
      double mx = scores[0];
      for (double s : scores) mx = std::max(mx, s);
      double z = 0.0;
      for (auto& s : scores) {
        s = std::exp(s - mx);
        z += s;
      }
      for (int t = 0; t < d; ++t) {
        double acc = 0.0;
        for (int j = 0; j < n; ++j) acc += scores[j] / z * v.at(j, head * d + t);
        heads.at(i, head * d + t) = acc;
      }
    }
  Matrix<double> out(n, c);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) {
      double acc = p.b_o[j];
      for (int t = 0; t < c; ++t) acc += heads.at(i, t) * p.w_o.at(t, j);
      out.at(i, j) = acc;
    }
  return out;
}

TEST(IntraStage, ZeroOutputProjectionIsResidualIdentity) {
  auto p = random_attention(1);
  p.w_o.zero();
  std::fill(p.b_o.begin(), p.b_o.end(), 0.0);
  LNParams<double> ln(kC);
  auto local = random_rows(5, kC, 2);
  auto rep = random_rows(1, kC, 3);
  const auto local0 = local, rep0 = rep;
  intra_region_stage(local, rep, ln, p);
  EXPECT_EQ(local.data, local0.data);
  EXPECT_EQ(rep.data, rep0.data);
}

TEST(IntraStage, SingleTokenRegionMatchesTwoTokenOracle) {
  const auto p = random_attention(4);
  LNParams<double> ln(kC);
  Rng rng(5);
  fill_random(ln.gamma, rng, 1.0);
  fill_random(ln.beta, rng, 0.3);
  auto local = random_rows(1, kC, 6);
  auto rep = random_rows(1, kC, 7);

  Matrix<double> u = concat_rows(rep, local);
  const Matrix<double> expected_att = naive_mhsa(layer_norm(u, ln), p);

  intra_region_stage(local, rep, ln, p);
  for (int j = 0; j < kC; ++j) {
    EXPECT_NEAR(rep.at(0, j), u.at(0, j) + expected_att.at(0, j), 1e-10);
    EXPECT_NEAR(local.at(0, j), u.at(1, j) + expected_att.at(1, j), 1e-10);
  }
}

TEST(IntraStage, SequenceRunsAtNPlusOne) {
  const auto p = random_attention(8);
  LNParams<double> ln(kC);
  auto local = random_rows(6, kC, 9);
  auto rep = random_rows(1, kC, 10);
  IntraStageCache<double> cache;
  intra_region_stage(local, rep, ln, p, &cache);
  EXPECT_EQ(cache.q.rows, 7);
  EXPECT_EQ(cache.seq, 7);
  EXPECT_EQ(local.rows, 6);
  EXPECT_EQ(rep.rows, 1);
}

TEST(InterStage, SingleRegionClosedForm) {
  const auto p = random_attention(11);
  LNParams<double> ln(kC);
  auto reps = random_rows(1, kC, 12);
  const auto reps0 = reps;
  inter_region_stage(reps, ln, p);
  // Single-token softmax is 1: out = S + (LN(S) Wv + bv) Wo + bo.
  Matrix<double> v;
  matmul(layer_norm(reps0, ln), p.w_v, v);
  add_row_inplace(v, p.b_v);
  Matrix<double> proj;
  matmul(v, p.w_o, proj);
  add_row_inplace(proj, p.b_o);
  for (int j = 0; j < kC; ++j) EXPECT_NEAR(reps.at(0, j), reps0.at(0, j) + proj.at(0, j), 1e-12);
}

TEST(InterStage, PermutationEquivariantOverRegions) {
  const auto p = random_attention(13);
  LNParams<double> ln(kC);
  auto reps = random_rows(6, kC, 14);
  auto base = reps;
  inter_region_stage(base, ln, p);
  std::vector<int> perm{3, 0, 5, 1, 4, 2};
  Matrix<double> permuted(6, kC);
  for (int i = 0; i < 6; ++i)
    std::copy(reps.row(perm[i]), reps.row(perm[i]) + kC, permuted.row(i));
  inter_region_stage(permuted, ln, p);
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < kC; ++j) EXPECT_NEAR(permuted.at(i, j), base.at(perm[i], j), 1e-6);
}

TEST(InterStage, ZeroOutputProjectionIsIdentity) {
  auto p = random_attention(15);
  p.w_o.zero();
  std::fill(p.b_o.begin(), p.b_o.end(), 0.0);
  LNParams<double> ln(kC);
  auto reps = random_rows(4, kC, 16);
  const auto reps0 = reps;
  inter_region_stage(reps, ln, p);
  EXPECT_EQ(reps.data, reps0.data);
}

// Local-global stage behavior through a full block with intra/inter off.
TEST(LgiStage, SingleRepBroadcastsOneValue) {
  EncoderConfig cfg = tiny_test_config(1);
  cfg.grid = {1, 2, 2};
  cfg.region = {1, 2, 2};  // one region
  cfg.stages = {false, false, true};
  BlockWeights<double> w(cfg);
  Rng rng(17);
  w.init(rng);
  w.ffn.zero();  // isolate the cross-attention update

  Matrix<double> locals = random_rows(4, kC, 18);
  Matrix<double> reps = random_rows(1, kC, 19);
  const auto locals0 = locals;
  lgi_block(locals, 4, reps, w);
  // Single key: every token gets the same value-projected rep.
  const Matrix<double> s_normed = layer_norm(reps, w.lgi_ln_kv);  // reps unchanged by zero FFN
  Matrix<double> v;
  matmul(s_normed, w.lgi_att.w_v, v);
  add_row_inplace(v, w.lgi_att.b_v);
  Matrix<double> proj;
  matmul(v, w.lgi_att.w_o, proj);
  add_row_inplace(proj, w.lgi_att.b_o);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < kC; ++j)
      EXPECT_NEAR(locals.at(i, j), locals0.at(i, j) + proj.at(0, j), 1e-10);
}

TEST(LgiStage, ZeroFfnMakesUpdatesIdentity) {
  EncoderConfig cfg = tiny_test_config(1);
  cfg.stages = {false, false, true};
  BlockWeights<double> w(cfg);
  Rng rng(20);
  w.init(rng);
  w.ffn.zero();
  w.lgi_att.zero();  // cross-attention also off; the whole block is identity

  Matrix<double> locals = random_rows(8, kC, 21);
  Matrix<double> reps = random_rows(2, kC, 23);
  const auto l0 = locals, r0 = reps;
  lgi_block(locals, 4, reps, w);
  EXPECT_EQ(locals.data, l0.data);
  EXPECT_EQ(reps.data, r0.data);
}

EncoderWeights<double> random_encoder(const EncoderConfig& cfg, std::uint64_t seed) {
  EncoderWeights<double> w(cfg);
  w.init(seed);
  return w;
}

TokenGrid<double> random_grid(GridShape g, int c, std::uint64_t seed) {
  TokenGrid<double> grid;
  grid.grid = g;
  grid.tokens = random_rows(g.tokens(), c, seed);
  return grid;
}

TEST(Encoder, BaseConfigShapes) {
  EncoderConfig cfg = EncoderConfig::base();
  EncoderWeights<float> w(cfg);  // zero weights; shape check only
  TokenGrid<float> grid;
  grid.grid = cfg.grid;
  grid.tokens = Matrix<float>(800, 512);
  const auto partition = make_partition(cfg.grid, cfg.region);
  const auto out = encode(grid, partition, nullptr, w);
  EXPECT_EQ(out.locals.rows, 800);
  EXPECT_EQ(out.locals.cols, 512);
  EXPECT_EQ(out.reps.rows, 8);
  EXPECT_EQ(out.reps.cols, 512);
}

TEST(Encoder, MaskedPretrainPassShrinksLocals) {
  EncoderConfig cfg = EncoderConfig::base();
  cfg.depth = 1;  // shape behavior only
  EncoderWeights<float> w(cfg);
  TokenGrid<float> grid;
  grid.grid = cfg.grid;
  grid.tokens = Matrix<float>(800, 512);
  const auto partition = make_partition(cfg.grid, cfg.region);
  const auto mask = sample_tube_mask(partition, 0.9, 3);
  const auto out = encode(grid, partition, &mask, w);
  EXPECT_EQ(out.locals.rows, 80);
  EXPECT_EQ(out.reps.rows, 8);
}

TEST(Encoder, DepthZeroReturnsPositionedTokensAndRawReps) {
  EncoderConfig cfg = tiny_test_config(0);
  auto w = random_encoder(cfg, 24);
  const auto grid = random_grid(cfg.grid, kC, 25);
  const auto partition = make_partition(cfg.grid, cfg.region);
  const auto out = encode(grid, partition, nullptr, w);
  EXPECT_EQ(out.reps.data, w.reps.data);

  Matrix<double> positioned = grid.tokens;
  add_inplace(positioned, sincos_position_table<double>(cfg.grid, kC));
  for (size_t i = 0; i < out.indices.size(); ++i)
    for (int j = 0; j < kC; ++j)
      EXPECT_EQ(out.locals.at(static_cast<int>(i), j), positioned.at(out.indices[i], j));
}

TEST(Encoder, ResidualSkeletonIsIdentity) {
  EncoderConfig cfg = tiny_test_config(3);
  auto w = random_encoder(cfg, 26);
  for (auto& b : w.blocks) {
    b.intra_att.w_o.zero();
    b.inter_att.w_o.zero();
    b.lgi_att.w_o.zero();
    b.ffn.w2.zero();
  }
  const auto grid = random_grid(cfg.grid, kC, 27);
  const auto partition = make_partition(cfg.grid, cfg.region);
  const auto out = encode<double>(grid, partition, nullptr, w, nullptr, /*add_pos=*/false);
  for (size_t i = 0; i < out.indices.size(); ++i)
    for (int j = 0; j < kC; ++j)
      EXPECT_EQ(out.locals.at(static_cast<int>(i), j), grid.tokens.at(out.indices[i], j));
  EXPECT_EQ(out.reps.data, w.reps.data);
}

TEST(Encoder, RegionPermutationEquivariance) {
  EncoderConfig cfg = tiny_test_config(2);
  cfg.grid = {2, 2, 2};
  cfg.region = {1, 1, 2};  // M = 4 regions, 2 tokens each
  auto w = random_encoder(cfg, 28);
  const int n = 2;

  Matrix<double> locals = random_rows(4 * n, kC, 29);
  Matrix<double> reps = random_rows(4, kC, 40);

  Matrix<double> base_locals = locals;
  Matrix<double> base_reps = reps;
  encode_regions(base_locals, n, base_reps, w);

  const std::vector<int> perm{2, 0, 3, 1};
  Matrix<double> perm_locals(4 * n, kC);
  Matrix<double> perm_reps(4, kC);
  for (int i = 0; i < 4; ++i) {
    for (int rrow = 0; rrow < n; ++rrow)
      std::copy(locals.row(perm[i] * n + rrow), locals.row(perm[i] * n + rrow) + kC,
                perm_locals.row(i * n + rrow));
    std::copy(reps.row(perm[i]), reps.row(perm[i]) + kC, perm_reps.row(i));
  }
  encode_regions(perm_locals, n, perm_reps, w);

  for (int i = 0; i < 4; ++i) {
    for (int rrow = 0; rrow < n; ++rrow)
      for (int j = 0; j < kC; ++j)
        EXPECT_NEAR(perm_locals.at(i * n + rrow, j), base_locals.at(perm[i] * n + rrow, j), 1e-6);
    for (int j = 0; j < kC; ++j)
      EXPECT_NEAR(perm_reps.at(i, j), base_reps.at(perm[i], j), 1e-6);
  }

  const auto pooled_base =
      pool_for_classification(base_locals, base_reps, PoolMode::kRepresentativeMean);
  const auto pooled_perm =
      pool_for_classification(perm_locals, perm_reps, PoolMode::kRepresentativeMean);
  for (int j = 0; j < kC; ++j) EXPECT_NEAR(pooled_base[j], pooled_perm[j], 1e-6);
}

TEST(Encoder, MaskedTokensAreNeverRead) {
  EncoderConfig cfg = tiny_test_config(2);
  auto w = random_encoder(cfg, 41);
  auto grid = random_grid(cfg.grid, kC, 42);
  const auto partition = make_partition(cfg.grid, cfg.region);
  const auto mask = sample_tube_mask(partition, 0.5, 43);
  const auto out = encode(grid, partition, &mask, w);

  auto perturbed = grid;
  Rng rng(44);
  for (int i = 0; i < perturbed.tokens.rows; ++i)
    if (!mask.visible[i])
      for (int j = 0; j < kC; ++j) perturbed.tokens.at(i, j) = rng.next_double() * 100.0;
  const auto out2 = encode(perturbed, partition, &mask, w);
  EXPECT_EQ(out.locals.data, out2.locals.data);
  EXPECT_EQ(out.reps.data, out2.reps.data);
}

TEST(Encoder, UnequalVisibleCountsRejected) {
  EncoderConfig cfg = tiny_test_config(1);
  auto w = random_encoder(cfg, 45);
  auto grid = random_grid(cfg.grid, kC, 46);
  const auto partition = make_partition(cfg.grid, cfg.region);
  TubeMask mask;
  mask.grid = cfg.grid;
  mask.rho = 0.5;
  mask.visible.assign(8, 0);
  mask.visible[0] = mask.visible[1] = mask.visible[2] = 1;  // 2 vs 1 per region
  EXPECT_THROW(encode(grid, partition, &mask, w), NonIntegralVisibleCount);
}

TEST(Encoder, StageTogglesChangeOnlyTheirParts) {
  EncoderConfig cfg = tiny_test_config(1);
  cfg.stages = {true, false, false};  // intra only
  BlockWeights<double> w(cfg);
  Rng rng(47);
  w.init(rng);
  const int n = 4;
  Matrix<double> locals = random_rows(2 * n, kC, 48);
  Matrix<double> reps = random_rows(2, kC, 50);
  const Matrix<double> locals_before = locals, reps_before = reps;
  lgi_block(locals, n, reps, w);
  // Intra-only: locals went through attention + FFN, reps only through intra.
  EXPECT_NE(locals.data, locals_before.data);
  EXPECT_NE(reps.data, reps_before.data);

  // Intra variant never touches cross-region state: changing region 1's
  // tokens cannot affect region 0's output.
  Matrix<double> locals2 = locals_before;
  const auto other = random_rows(n, kC, 51);
  for (int i = 0; i < n; ++i)
    std::copy(other.row(i), other.row(i) + kC, locals2.row(n + i));
  Matrix<double> reps2 = reps_before;
  lgi_block(locals2, n, reps2, w);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < kC; ++j) EXPECT_EQ(locals2.at(i, j), locals.at(i, j));
}

TEST(Pooling, RepresentativeMeanBasics) {
  Matrix<double> reps(1, 4);
  for (int j = 0; j < 4; ++j) reps.at(0, j) = j + 1.0;
  Matrix<double> locals(3, 4);
  const auto single = pool_for_classification(locals, reps, PoolMode::kRepresentativeMean);
  for (int j = 0; j < 4; ++j) EXPECT_EQ(single[j], j + 1.0);

  Matrix<double> equal(5, 4);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 4; ++j) equal.at(i, j) = 2.5 - j;
  const auto pooled = pool_for_classification(locals, equal, PoolMode::kRepresentativeMean);
  for (int j = 0; j < 4; ++j) EXPECT_NEAR(pooled[j], 2.5 - j, 1e-12);
}

TEST(Pooling, LocalMeanAveragesLocals) {
  Matrix<double> locals(2, 3);
  locals.at(0, 0) = 1.0;
  locals.at(1, 0) = 3.0;
  locals.at(0, 1) = -2.0;
  locals.at(1, 1) = 2.0;
  const auto pooled = pool_for_classification(locals, Matrix<double>(), PoolMode::kLocalMean);
  EXPECT_EQ(pooled[0], 2.0);
  EXPECT_EQ(pooled[1], 0.0);
  EXPECT_EQ(pooled[2], 0.0);
}

// End-to-end gradient through the full encoder stack on the tiny config.
TEST(Encoder, PooledLossGradientMatchesFiniteDifferences) {
  EncoderConfig cfg = tiny_test_config(2);
  auto w = random_encoder(cfg, 52);
  const auto grid = random_grid(cfg.grid, kC, 53);
  const auto partition = make_partition(cfg.grid, cfg.region);
  const std::vector<double> probe = [&] {
    std::vector<double> v(kC);
    Rng rng(54);
    fill_random(v, rng);
    return v;
  }();

  const auto loss = [&]() {
    const auto out = encode(grid, partition, nullptr, const_cast<EncoderWeights<double>&>(w));
    const auto pooled = pool_for_classification(out.locals, out.reps, PoolMode::kRepresentativeMean);
    double l = 0.0;
    for (int j = 0; j < kC; ++j) l += pooled[j] * probe[j];
    return l;
  };

  EncodeCache<double> cache;
  const auto out = encode(grid, partition, nullptr, w, &cache);
  EncoderWeights<double> grad(cfg);
  grad.zero();
  // d(pooled . probe)/dreps = probe / M per row; locals get no direct grad.
  Matrix<double> dreps(out.reps.rows, kC);
  for (int i = 0; i < dreps.rows; ++i)
    for (int j = 0; j < kC; ++j) dreps.at(i, j) = probe[j] / out.reps.rows;
  Matrix<double> dlocals(out.locals.rows, kC);
  encode_backward(dlocals, dreps, cfg.grid, cache, w, grad);

  std::vector<ParamRef<double>> params, grads;
  w.visit_params(params);
  grad.visit_params(grads);
  ASSERT_EQ(params.size(), grads.size());
  const auto res = fd_check(params, grads, loss, 1e-5, 5);
  EXPECT_LT(res.max_rel, 1e-4) << "checked " << res.checked;
}

}  // namespace
