#pragma once

#include <cmath>
#include <vector>

#include "lgmae/core.hpp"
#include "lgmae/rng.hpp"

namespace lgmae {

struct MissingCache : std::runtime_error {
  explicit MissingCache(const std::string& w) : std::runtime_error(w) {}
};

inline constexpr double kLnEps = 1e-6;

template <typename T>
struct LNParams {
  std::vector<T> gamma, beta;
  explicit LNParams(int c = 0) : gamma(c, T(1)), beta(c, T(0)) {}
  void zero() {
    std::fill(gamma.begin(), gamma.end(), T(0));
    std::fill(beta.begin(), beta.end(), T(0));
  }
};

template <typename T>
struct AttentionParams {
  Matrix<T> w_q, w_k, w_v, w_o;       // each [C, C], heads fused
  std::vector<T> b_q, b_k, b_v, b_o;  // [C]
  int heads = 1;

  explicit AttentionParams(int c = 0, int h = 1)
      : w_q(c, c), w_k(c, c), w_v(c, c), w_o(c, c), b_q(c, T(0)), b_k(c, T(0)), b_v(c, T(0)),
        b_o(c, T(0)), heads(h) {
    require_shape(c == 0 || c % h == 0, "AttentionParams: C not divisible by heads");
  }

  // Fan-scaled init keeps the value/output path an O(1) map, so content
  // transmits through the block stack from the first step. Pass a stddev to
  // override (tests condition gradients with larger draws).
  void init(Rng& rng, double stddev = 0.0) {
    const double sd = stddev > 0.0 ? stddev : std::sqrt(1.0 / w_q.rows);
    for (Matrix<T>* m : {&w_q, &w_k, &w_v, &w_o})
      for (auto& v : m->data) v = static_cast<T>(rng.next_trunc_normal(sd));
  }
  void zero() {
    for (Matrix<T>* m : {&w_q, &w_k, &w_v, &w_o}) m->zero();
    for (std::vector<T>* b : {&b_q, &b_k, &b_v, &b_o}) std::fill(b->begin(), b->end(), T(0));
  }
};

template <typename T>
struct FFNParams {
  Matrix<T> w1;  // [C, rC]
  Matrix<T> w2;  // [rC, C]
  std::vector<T> b1, b2;

  FFNParams() = default;
  FFNParams(int c, int ratio) : w1(c, c * ratio), w2(c * ratio, c), b1(c * ratio, T(0)), b2(c, T(0)) {}

  void init(Rng& rng, double stddev = 0.0) {
    const double sd1 = stddev > 0.0 ? stddev : std::sqrt(2.0 / (w1.rows + w1.cols));
    const double sd2 = stddev > 0.0 ? stddev : std::sqrt(2.0 / (w2.rows + w2.cols));
    for (auto& v : w1.data) v = static_cast<T>(rng.next_trunc_normal(sd1));
    for (auto& v : w2.data) v = static_cast<T>(rng.next_trunc_normal(sd2));
  }
  void zero() {
    w1.zero();
    w2.zero();
    std::fill(b1.begin(), b1.end(), T(0));
    std::fill(b2.begin(), b2.end(), T(0));
  }
};

// ---------------------------------------------------------------------------
// layer norm

template <typename T>
struct LNCache {
  Matrix<T> xhat;          // normalized pre-affine input
  std::vector<T> inv_std;  // per row
};

template <typename T>
Matrix<T> layer_norm(const Matrix<T>& x, const LNParams<T>& p, LNCache<T>* cache = nullptr) {
  require_shape(static_cast<size_t>(x.cols) == p.gamma.size(), "layer_norm: channel mismatch");
  Matrix<T> out(x.rows, x.cols);
  if (cache != nullptr) {
    cache->xhat = Matrix<T>(x.rows, x.cols);
    cache->inv_std.assign(x.rows, T(0));
  }
  for (int i = 0; i < x.rows; ++i) {
    const T* r = x.row(i);
    double mean = 0.0;
    for (int j = 0; j < x.cols; ++j) mean += r[j];
    mean /= x.cols;
    double var = 0.0;
    for (int j = 0; j < x.cols; ++j) {
      const double d = r[j] - mean;
      var += d * d;
    }
    var /= x.cols;
    const double inv = 1.0 / std::sqrt(var + kLnEps);
    T* o = out.row(i);
    for (int j = 0; j < x.cols; ++j) {
      const T xh = static_cast<T>((r[j] - mean) * inv);
      o[j] = xh * p.gamma[j] + p.beta[j];
      if (cache != nullptr) cache->xhat.at(i, j) = xh;
    }
    if (cache != nullptr) cache->inv_std[i] = static_cast<T>(inv);
  }
  return out;
}

template <typename T>
Matrix<T> layer_norm_backward(const Matrix<T>& dout, const LNCache<T>& cache, const LNParams<T>& p,
                              LNParams<T>& grad) {
  if (cache.xhat.rows == 0) throw MissingCache("layer_norm_backward: forward cache empty");
  const int n = dout.rows, c = dout.cols;
  Matrix<T> dx(n, c);
  for (int i = 0; i < n; ++i) {
    const T* dy = dout.row(i);
    const T* xh = cache.xhat.row(i);
    double mean_g = 0.0, mean_gx = 0.0;
    for (int j = 0; j < c; ++j) {
      const double g = static_cast<double>(dy[j]) * p.gamma[j];
      mean_g += g;
      mean_gx += g * xh[j];
      grad.gamma[j] += dy[j] * xh[j];
      grad.beta[j] += dy[j];
    }
    mean_g /= c;
    mean_gx /= c;
    T* dxi = dx.row(i);
    const double inv = cache.inv_std[i];
    for (int j = 0; j < c; ++j) {
      const double g = static_cast<double>(dy[j]) * p.gamma[j];
      dxi[j] = static_cast<T>(inv * (g - mean_g - xh[j] * mean_gx));
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// attention

template <typename T>
struct AttentionCache {
  Matrix<T> xq, xkv;              // projection inputs
  Matrix<T> q, k, v;              // [n,C], [m,C], [m,C]
  std::vector<Matrix<T>> probs;   // per head [n, m]
  Matrix<T> heads_out;            // concatenated [n, C]
};

namespace detail {

template <typename T>
Matrix<T> slice_cols(const Matrix<T>& m, int start, int count) {
  Matrix<T> out(m.rows, count);
  for (int i = 0; i < m.rows; ++i)
    std::copy(m.row(i) + start, m.row(i) + start + count, out.row(i));
  return out;
}

template <typename T>
void paste_cols(Matrix<T>& dst, const Matrix<T>& src, int start) {
  for (int i = 0; i < src.rows; ++i)
    std::copy(src.row(i), src.row(i) + src.cols, dst.row(i) + start);
}

template <typename T>
Matrix<T> linear(const Matrix<T>& x, const Matrix<T>& w, const std::vector<T>& b) {
  Matrix<T> out;
  matmul(x, w, out);
  add_row_inplace(out, b);
  return out;
}

// Row-stabilized softmax in place.
template <typename T>
void softmax_rows(Matrix<T>& m) {
  for (int i = 0; i < m.rows; ++i) {
    T* r = m.row(i);
    T mx = r[0];
    for (int j = 1; j < m.cols; ++j) mx = std::max(mx, r[j]);
    double sum = 0.0;
    for (int j = 0; j < m.cols; ++j) {
      const double e = std::exp(static_cast<double>(r[j] - mx));
      r[j] = static_cast<T>(e);
      sum += e;
    }
    const double inv = 1.0 / sum;
    for (int j = 0; j < m.cols; ++j) r[j] = static_cast<T>(r[j] * inv);
  }
}

}  // namespace detail

// Queries from xq, keys/values from xkv; per-head softmax(Q K^T / sqrt(d)) V
// with concatenated heads and an output projection. mhsa is the xq == xkv
// special case.
template <typename T>
Matrix<T> mhca(const Matrix<T>& xq, const Matrix<T>& xkv, const AttentionParams<T>& p,
               AttentionCache<T>* cache = nullptr) {
  require_shape(xq.cols == p.w_q.rows && xkv.cols == p.w_k.rows, "mhca: channel mismatch");
  const int c = xq.cols;
  const int h = p.heads;
  const int d = c / h;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));

  Matrix<T> q = detail::linear(xq, p.w_q, p.b_q);
  Matrix<T> k = detail::linear(xkv, p.w_k, p.b_k);
  Matrix<T> v = detail::linear(xkv, p.w_v, p.b_v);

  Matrix<T> heads_out(xq.rows, c);
  std::vector<Matrix<T>> probs;
  if (cache != nullptr) probs.reserve(h);
  for (int j = 0; j < h; ++j) {
    const Matrix<T> qh = detail::slice_cols(q, j * d, d);
    const Matrix<T> kh = detail::slice_cols(k, j * d, d);
    const Matrix<T> vh = detail::slice_cols(v, j * d, d);
    Matrix<T> scores;
    matmul_nt(qh, kh, scores);
    scale_inplace(scores, scale);
    detail::softmax_rows(scores);
    Matrix<T> oh;
    matmul(scores, vh, oh);
    detail::paste_cols(heads_out, oh, j * d);
    if (cache != nullptr) probs.push_back(std::move(scores));
  }
  Matrix<T> out = detail::linear(heads_out, p.w_o, p.b_o);
  if (cache != nullptr) {
    cache->xq = xq;
    cache->xkv = xkv;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->probs = std::move(probs);
    cache->heads_out = std::move(heads_out);
  }
  return out;
}

template <typename T>
Matrix<T> mhsa(const Matrix<T>& x, const AttentionParams<T>& p, AttentionCache<T>* cache = nullptr) {
  return mhca(x, x, p, cache);
}

template <typename T>
struct AttentionGrads {
  Matrix<T> dxq, dxkv;
};

// Returns input gradients; parameter gradients accumulate into `grad`.
// For self-attention the caller adds dxq + dxkv.
template <typename T>
AttentionGrads<T> mhca_backward(const Matrix<T>& dout, const AttentionCache<T>& cache,
                                const AttentionParams<T>& p, AttentionParams<T>& grad) {
  if (cache.heads_out.rows == 0) throw MissingCache("mhca_backward: forward cache empty");
  const int c = dout.cols;
  const int h = p.heads;
  const int d = c / h;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));
  const int n = cache.xq.rows, m = cache.xkv.rows;

  // Output projection.
  Matrix<T> dheads;
  matmul_nt(dout, p.w_o, dheads);
  matmul_tn_acc(cache.heads_out, dout, grad.w_o);
  for (int i = 0; i < dout.rows; ++i)
    for (int j = 0; j < c; ++j) grad.b_o[j] += dout.at(i, j);

  Matrix<T> dq(n, c), dk(m, c), dv(m, c);
  for (int j = 0; j < h; ++j) {
    const Matrix<T> qh = detail::slice_cols(cache.q, j * d, d);
    const Matrix<T> kh = detail::slice_cols(cache.k, j * d, d);
    const Matrix<T> vh = detail::slice_cols(cache.v, j * d, d);
    const Matrix<T> doh = detail::slice_cols(dheads, j * d, d);
    const Matrix<T>& probs = cache.probs[j];

    Matrix<T> dprobs;
    matmul_nt(doh, vh, dprobs);
    Matrix<T> dvh;
    matmul_tn(probs, doh, dvh);

    // Softmax backward, then the 1/sqrt(d) score scale.
    Matrix<T> dscores(n, m);
    for (int i = 0; i < n; ++i) {
      const T* pr = probs.row(i);
      const T* dp = dprobs.row(i);
      double dot = 0.0;
      for (int t = 0; t < m; ++t) dot += static_cast<double>(dp[t]) * pr[t];
      T* ds = dscores.row(i);
      for (int t = 0; t < m; ++t)
        ds[t] = static_cast<T>(pr[t] * (dp[t] - dot) * scale);
    }

    Matrix<T> dqh;
    matmul(dscores, kh, dqh);
    Matrix<T> dkh;
    matmul_tn(dscores, qh, dkh);
    detail::paste_cols(dq, dqh, j * d);
    detail::paste_cols(dk, dkh, j * d);
    detail::paste_cols(dv, dvh, j * d);
  }

  AttentionGrads<T> g;
  auto back_proj = [](const Matrix<T>& dy, const Matrix<T>& x, const Matrix<T>& w, Matrix<T>& dw_acc,
                      std::vector<T>& db_acc, Matrix<T>& dx_out) {
    Matrix<T> dx;
    matmul_nt(dy, w, dx);
    matmul_tn_acc(x, dy, dw_acc);
    for (int i = 0; i < dy.rows; ++i)
      for (int j = 0; j < dy.cols; ++j) db_acc[j] += dy.at(i, j);
    if (dx_out.rows == 0)
      dx_out = std::move(dx);
    else
      add_inplace(dx_out, dx);
  };
  back_proj(dq, cache.xq, p.w_q, grad.w_q, grad.b_q, g.dxq);
  back_proj(dk, cache.xkv, p.w_k, grad.w_k, grad.b_k, g.dxkv);
  back_proj(dv, cache.xkv, p.w_v, grad.w_v, grad.b_v, g.dxkv);
  return g;
}

template <typename T>
Matrix<T> mhsa_backward(const Matrix<T>& dout, const AttentionCache<T>& cache,
                        const AttentionParams<T>& p, AttentionParams<T>& grad) {
  AttentionGrads<T> g = mhca_backward(dout, cache, p, grad);
  add_inplace(g.dxq, g.dxkv);
  return std::move(g.dxq);
}

// ---------------------------------------------------------------------------
// feed-forward

template <typename T>
T gelu(T x) {
  return static_cast<T>(0.5 * x * (1.0 + std::erf(static_cast<double>(x) * 0.70710678118654752440)));
}

template <typename T>
T gelu_grad(T x) {
  const double xd = x;
  const double cdf = 0.5 * (1.0 + std::erf(xd * 0.70710678118654752440));
  const double pdf = std::exp(-0.5 * xd * xd) * 0.39894228040143267794;
  return static_cast<T>(cdf + xd * pdf);
}

enum class Activation { kGelu, kLinear };

template <typename T>
struct FFNCache {
  Matrix<T> x;       // input
  Matrix<T> hidden;  // pre-activation
  Matrix<T> act;     // post-activation
  Activation activation = Activation::kGelu;
};

template <typename T>
Matrix<T> ffn(const Matrix<T>& x, const FFNParams<T>& p, FFNCache<T>* cache = nullptr,
              Activation activation = Activation::kGelu) {
  Matrix<T> hidden = detail::linear(x, p.w1, p.b1);
  Matrix<T> act = hidden;
  if (activation == Activation::kGelu)
    for (auto& v : act.data) v = gelu(v);
  Matrix<T> out = detail::linear(act, p.w2, p.b2);
  if (cache != nullptr) {
    cache->x = x;
    cache->hidden = std::move(hidden);
    cache->act = std::move(act);
    cache->activation = activation;
  }
  return out;
}

template <typename T>
Matrix<T> ffn_backward(const Matrix<T>& dout, const FFNCache<T>& cache, const FFNParams<T>& p,
                       FFNParams<T>& grad) {
  if (cache.hidden.rows == 0) throw MissingCache("ffn_backward: forward cache empty");
  Matrix<T> dact;
  matmul_nt(dout, p.w2, dact);
  matmul_tn_acc(cache.act, dout, grad.w2);
  for (int i = 0; i < dout.rows; ++i)
    for (int j = 0; j < dout.cols; ++j) grad.b2[j] += dout.at(i, j);

  if (cache.activation == Activation::kGelu)
    for (size_t i = 0; i < dact.data.size(); ++i) dact.data[i] *= gelu_grad(cache.hidden.data[i]);

  Matrix<T> dx;
  matmul_nt(dact, p.w1, dx);
  matmul_tn_acc(cache.x, dact, grad.w1);
  for (int i = 0; i < dact.rows; ++i)
    for (int j = 0; j < dact.cols; ++j) grad.b1[j] += dact.at(i, j);
  return dx;
}

}  // namespace lgmae
