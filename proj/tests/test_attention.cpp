#include <gtest/gtest.h>

#include <cmath>

#include "lgmae/attention.hpp"
#include "test_util.hpp"

using namespace lgmae;
using lgmae::test::fd_check;
using lgmae::test::fill_random;

namespace {

constexpr int kC = 12;
constexpr int kHeads = 3;
constexpr int kRows = 7;

AttentionParams<double> random_attention(std::uint64_t seed, int c = kC, int heads = kHeads) {
  AttentionParams<double> p(c, heads);
  Rng rng(seed);
  p.init(rng, 0.3);
  fill_random(p.b_q, rng, 0.1);
  fill_random(p.b_k, rng, 0.1);
  fill_random(p.b_v, rng, 0.1);
  fill_random(p.b_o, rng, 0.1);
  return p;
}

Matrix<double> random_rows(int n, int c, std::uint64_t seed, double scale = 1.0) {
  Matrix<double> m(n, c);
  Rng rng(seed);
  fill_random(m, rng, scale);
  return m;
}

TEST(LayerNorm, ConstantRowGivesZero) {
  Matrix<double> x(1, 8, 3.7);
  LNParams<double> p(8);
  const auto y = layer_norm(x, p);
  for (double v : y.data) EXPECT_NEAR(v, 0.0, 1e-9);
}

TEST(LayerNorm, ZeroGammaGivesBeta) {
  auto x = random_rows(4, 8, 1);
  LNParams<double> p(8);
  std::fill(p.gamma.begin(), p.gamma.end(), 0.0);
  for (int j = 0; j < 8; ++j) p.beta[j] = j * 0.5;
  const auto y = layer_norm(x, p);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 8; ++j) EXPECT_EQ(y.at(i, j), j * 0.5);
}

TEST(LayerNorm, NormalizesRandomRows) {
  auto x = random_rows(5, 64, 2, 3.0);
  LNParams<double> p(64);
  const auto y = layer_norm(x, p);
  for (int i = 0; i < 5; ++i) {
    double mean = 0.0, var = 0.0;
    for (int j = 0; j < 64; ++j) mean += y.at(i, j);
    mean /= 64;
    for (int j = 0; j < 64; ++j) var += (y.at(i, j) - mean) * (y.at(i, j) - mean);
    var /= 64;
    EXPECT_NEAR(mean, 0.0, 1e-6);
    EXPECT_NEAR(var, 1.0, 1e-4);
  }
}

TEST(Mhsa, SingleTokenReducesToValuePath) {
  const auto p = random_attention(3);
  const auto x = random_rows(1, kC, 4);
  const auto y = mhsa(x, p);
  // Softmax over one element is 1, so out = (x Wv + bv) Wo + bo.
  Matrix<double> v;
  matmul(x, p.w_v, v);
  add_row_inplace(v, p.b_v);
  Matrix<double> expect;
  matmul(v, p.w_o, expect);
  add_row_inplace(expect, p.b_o);
  for (int j = 0; j < kC; ++j) EXPECT_NEAR(y.at(0, j), expect.at(0, j), 1e-12);
}

TEST(Mhsa, AttentionRowsSumToOne) {
  const auto p = random_attention(5);
  const auto x = random_rows(kRows, kC, 6);
  AttentionCache<double> cache;
  mhsa(x, p, &cache);
  ASSERT_EQ(static_cast<int>(cache.probs.size()), kHeads);
  for (const auto& probs : cache.probs)
    for (int i = 0; i < probs.rows; ++i) {
      double sum = 0.0;
      for (int j = 0; j < probs.cols; ++j) sum += probs.at(i, j);
      EXPECT_NEAR(sum, 1.0, 1e-6);
    }
}

TEST(Mhsa, PermutationEquivariant) {
  const auto p = random_attention(7);
  const auto x = random_rows(kRows, kC, 8);
  const auto y = mhsa(x, p);
  Rng rng(9);
  std::vector<int> perm(kRows);
  for (int i = 0; i < kRows; ++i) perm[i] = i;
  for (int trial = 0; trial < 5; ++trial) {
    rng.shuffle(perm);
    Matrix<double> xp(kRows, kC);
    for (int i = 0; i < kRows; ++i)
      std::copy(x.row(perm[i]), x.row(perm[i]) + kC, xp.row(i));
    const auto yp = mhsa(xp, p);
    for (int i = 0; i < kRows; ++i)
      for (int j = 0; j < kC; ++j) EXPECT_NEAR(yp.at(i, j), y.at(perm[i], j), 1e-6);
  }
}

TEST(Mhca, SelfInputsMatchMhsa) {
  const auto p = random_attention(10);
  const auto x = random_rows(kRows, kC, 11);
  const auto a = mhsa(x, p);
  const auto b = mhca(x, x, p);
  EXPECT_EQ(a.data, b.data);
}

TEST(Mhca, SingleKeyIgnoresQueryValues) {
  const auto p = random_attention(12);
  const auto y = random_rows(1, kC, 13);
  const auto x1 = random_rows(kRows, kC, 14);
  const auto x2 = random_rows(kRows, kC, 15);
  const auto o1 = mhca(x1, y, p);
  const auto o2 = mhca(x2, y, p);
  for (int i = 0; i < kRows; ++i)
    for (int j = 0; j < kC; ++j) {
      EXPECT_NEAR(o1.at(i, j), o2.at(i, j), 1e-12);
      EXPECT_NEAR(o1.at(i, j), o1.at(0, j), 1e-12);
    }
}

TEST(Mhca, KeyPermutationInvariant) {
  const auto p = random_attention(16);
  const auto x = random_rows(4, kC, 17);
  const auto y = random_rows(6, kC, 18);
  const auto base = mhca(x, y, p);
  Rng rng(19);
  std::vector<int> perm{0, 1, 2, 3, 4, 5};
  for (int trial = 0; trial < 5; ++trial) {
    rng.shuffle(perm);
    Matrix<double> yp(6, kC);
    for (int i = 0; i < 6; ++i) std::copy(y.row(perm[i]), y.row(perm[i]) + kC, yp.row(i));
    const auto out = mhca(x, yp, p);
    for (size_t i = 0; i < out.data.size(); ++i) EXPECT_NEAR(out.data[i], base.data[i], 1e-6);
  }
}

TEST(Ffn, ZeroWeightsGiveZero) {
  FFNParams<double> p(6, 4);
  const auto x = random_rows(3, 6, 20);
  const auto y = ffn(x, p);
  for (double v : y.data) EXPECT_EQ(v, 0.0);
}

TEST(Ffn, IdentityConfigWithLinearActivation) {
  FFNParams<double> p(5, 1);
  for (int i = 0; i < 5; ++i) {
    p.w1.at(i, i) = 1.0;
    p.w2.at(i, i) = 1.0;
  }
  const auto x = random_rows(4, 5, 21);
  const auto y = ffn<double>(x, p, nullptr, Activation::kLinear);
  for (size_t i = 0; i < x.data.size(); ++i) EXPECT_NEAR(y.data[i], x.data[i], 1e-12);
}

// ---------------------------------------------------------------------------
// gradients vs central finite differences (double precision)

double frobenius(const Matrix<double>& m) {
  double s = 0.0;
  for (double v : m.data) s += v * v;
  return 0.5 * s;
}

TEST(Gradients, LayerNormMatchesFiniteDifferences) {
  auto x = random_rows(kRows, kC, 22);
  LNParams<double> p(kC);
  Rng rng(23);
  fill_random(p.gamma, rng, 1.0);
  fill_random(p.beta, rng, 0.5);

  const auto loss = [&]() { return frobenius(layer_norm(x, p)); };

  LNCache<double> cache;
  const auto y = layer_norm(x, p, &cache);
  LNParams<double> grad(kC);
  grad.zero();
  const auto dx = layer_norm_backward(y, cache, p, grad);  // upstream = y for 0.5*|y|^2

  std::vector<ParamRef<double>> params, grads;
  add_param(params, "x", x);
  add_param(params, "gamma", p.gamma);
  add_param(params, "beta", p.beta);
  Matrix<double> dx_copy = dx;
  add_param(grads, "x", dx_copy);
  add_param(grads, "gamma", grad.gamma);
  add_param(grads, "beta", grad.beta);

  const auto res = fd_check(params, grads, loss);
  EXPECT_LT(res.max_rel, 1e-5) << "checked " << res.checked;
}

TEST(Gradients, LayerNormShiftInvariance) {
  auto x = random_rows(3, kC, 24);
  LNParams<double> p(kC);
  LNCache<double> cache;
  const auto y = layer_norm(x, p, &cache);
  LNParams<double> grad(kC);
  grad.zero();
  const auto dx = layer_norm_backward(y, cache, p, grad);
  // Constant input shifts do not change LN output, so row sums of dx ~ 0.
  for (int i = 0; i < dx.rows; ++i) {
    double s = 0.0;
    for (int j = 0; j < dx.cols; ++j) s += dx.at(i, j);
    EXPECT_NEAR(s, 0.0, 1e-10);
  }
}

template <typename Fwd, typename Bwd>
void check_attention_gradients(Fwd forward, Bwd backward, Matrix<double>& xq, Matrix<double>& xkv,
                               AttentionParams<double>& p, bool self) {
  const auto loss = [&]() { return frobenius(forward()); };

  AttentionCache<double> cache;
  const Matrix<double> y = forward(&cache);
  AttentionParams<double> grad(kC, kHeads);
  grad.zero();
  Matrix<double> dxq, dxkv;
  backward(y, cache, grad, dxq, dxkv);

  std::vector<ParamRef<double>> params, grads;
  add_param(params, "xq", xq);
  add_param(grads, "xq", dxq);
  if (!self) {
    add_param(params, "xkv", xkv);
    add_param(grads, "xkv", dxkv);
  }
  add_param(params, "w_q", p.w_q);
  add_param(params, "w_k", p.w_k);
  add_param(params, "w_v", p.w_v);
  add_param(params, "w_o", p.w_o);
  add_param(params, "b_q", p.b_q);
  add_param(params, "b_k", p.b_k);
  add_param(params, "b_v", p.b_v);
  add_param(params, "b_o", p.b_o);
  add_param(grads, "w_q", grad.w_q);
  add_param(grads, "w_k", grad.w_k);
  add_param(grads, "w_v", grad.w_v);
  add_param(grads, "w_o", grad.w_o);
  add_param(grads, "b_q", grad.b_q);
  add_param(grads, "b_k", grad.b_k);
  add_param(grads, "b_v", grad.b_v);
  add_param(grads, "b_o", grad.b_o);

  const auto res = fd_check(params, grads, loss);
  EXPECT_LT(res.max_rel, 1e-5) << "checked " << res.checked;
}

TEST(Gradients, MhsaMatchesFiniteDifferences) {
  auto x = random_rows(kRows, kC, 25);
  auto p = random_attention(26);
  auto forward = [&](AttentionCache<double>* c = nullptr) { return mhsa(x, p, c); };
  auto backward = [&](const Matrix<double>& dy, const AttentionCache<double>& cache,
                      AttentionParams<double>& grad, Matrix<double>& dxq, Matrix<double>& dxkv) {
    dxq = mhsa_backward(dy, cache, p, grad);
    dxkv = Matrix<double>(0, 0);
  };
  check_attention_gradients(forward, backward, x, x, p, true);
}

TEST(Gradients, MhcaMatchesFiniteDifferences) {
  auto xq = random_rows(5, kC, 27);
  auto xkv = random_rows(4, kC, 28);
  auto p = random_attention(29);
  auto forward = [&](AttentionCache<double>* c = nullptr) { return mhca(xq, xkv, p, c); };
  auto backward = [&](const Matrix<double>& dy, const AttentionCache<double>& cache,
                      AttentionParams<double>& grad, Matrix<double>& dxq, Matrix<double>& dxkv) {
    AttentionGrads<double> g = mhca_backward(dy, cache, p, grad);
    dxq = std::move(g.dxq);
    dxkv = std::move(g.dxkv);
  };
  check_attention_gradients(forward, backward, xq, xkv, p, false);
}

TEST(Gradients, FfnMatchesFiniteDifferences) {
  auto x = random_rows(kRows, kC, 30);
  FFNParams<double> p(kC, 2);
  Rng rng(31);
  p.init(rng, 0.3);
  fill_random(p.b1, rng, 0.1);
  fill_random(p.b2, rng, 0.1);

  const auto loss = [&]() { return frobenius(ffn(x, p)); };

  FFNCache<double> cache;
  const auto y = ffn(x, p, &cache);
  FFNParams<double> grad(kC, 2);
  grad.zero();
  auto dx = ffn_backward(y, cache, p, grad);

  std::vector<ParamRef<double>> params, grads;
  add_param(params, "x", x);
  add_param(grads, "x", dx);
  add_param(params, "w1", p.w1);
  add_param(grads, "w1", grad.w1);
  add_param(params, "b1", p.b1);
  add_param(grads, "b1", grad.b1);
  add_param(params, "w2", p.w2);
  add_param(grads, "w2", grad.w2);
  add_param(params, "b2", p.b2);
  add_param(grads, "b2", grad.b2);

  const auto res = fd_check(params, grads, loss);
  EXPECT_LT(res.max_rel, 1e-5) << "checked " << res.checked;
}

TEST(Gradients, BackwardIsLinearInUpstream) {
  auto x = random_rows(kRows, kC, 32);
  auto p = random_attention(33);
  AttentionCache<double> cache;
  mhsa(x, p, &cache);

  Matrix<double> dy = random_rows(kRows, kC, 34);
  AttentionParams<double> g1(kC, kHeads), g2(kC, kHeads);
  g1.zero();
  g2.zero();
  const auto dx1 = mhsa_backward(dy, cache, p, g1);
  Matrix<double> dy3 = dy;
  scale_inplace(dy3, 3.0);
  const auto dx3 = mhsa_backward(dy3, cache, p, g2);
  for (size_t i = 0; i < dx1.data.size(); ++i) EXPECT_NEAR(dx3.data[i], 3.0 * dx1.data[i], 1e-9);
  for (size_t i = 0; i < g1.w_q.data.size(); ++i)
    EXPECT_NEAR(g2.w_q.data[i], 3.0 * g1.w_q.data[i], 1e-9);
}

TEST(Gradients, BackwardWithoutForwardCacheThrows) {
  const auto p = random_attention(35);
  AttentionCache<double> cache;
  AttentionParams<double> grad(kC, kHeads);
  Matrix<double> dy(2, kC);
  EXPECT_THROW(mhsa_backward(dy, cache, p, grad), MissingCache);
  FFNCache<double> fcache;
  FFNParams<double> fp(kC, 2), fgrad(kC, 2);
  EXPECT_THROW(ffn_backward(dy, fcache, fp, fgrad), MissingCache);
}

}  // namespace
