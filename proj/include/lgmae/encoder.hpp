#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "lgmae/attention.hpp"
#include "lgmae/core.hpp"
#include "lgmae/masking.hpp"
#include "lgmae/tokenizer.hpp"

namespace lgmae {

enum class PoolMode { kRepresentativeMean, kLocalMean };

struct StageToggles {
  bool intra = true;
  bool inter = true;
  bool lgi = true;
};

// Architecture hyperparameters. `grid` is the token grid the weights are
// built for; together with `region` it fixes the number of representative
// tokens M. `vit_global` switches to plain global-attention blocks over all
// tokens (no regions, no representative tokens).
struct EncoderConfig {
  int depth = 16;
  int channels = 512;
  int heads = 8;
  RegionShape region{2, 5, 10};
  GridShape grid{8, 10, 10};
  StageToggles stages;
  bool vit_global = false;
  PoolMode pool = PoolMode::kRepresentativeMean;
  int ffn_ratio = 4;

  int num_regions() const {
    return vit_global ? 0 : make_partition(grid, region).num_regions();
  }

  static EncoderConfig tiny() {
    EncoderConfig c;
    c.channels = 256;
    c.heads = 4;
    return c;
  }
  static EncoderConfig small() {
    EncoderConfig c;
    c.channels = 384;
    c.heads = 6;
    return c;
  }
  static EncoderConfig base() { return EncoderConfig{}; }
  static EncoderConfig vit_base() {
    EncoderConfig c;
    c.depth = 12;
    c.channels = 768;
    c.heads = 12;
    c.vit_global = true;
    c.pool = PoolMode::kLocalMean;
    return c;
  }
};

// One block: intra-region attention, inter-region attention over the
// representative tokens, cross-attention from locals to all representative
// tokens, and a single FFN shared between the local-token and
// representative-token updates. Disabled stages carry no parameters.
template <typename T>
struct BlockWeights {
  StageToggles stages;
  bool vit_global = false;

  LNParams<T> intra_ln;
  AttentionParams<T> intra_att;
  LNParams<T> inter_ln;
  AttentionParams<T> inter_att;
  LNParams<T> lgi_ln_q, lgi_ln_kv;
  AttentionParams<T> lgi_att;
  LNParams<T> ffn_ln_local, ffn_ln_rep;
  FFNParams<T> ffn;

  BlockWeights() = default;
  BlockWeights(const EncoderConfig& cfg) : stages(cfg.stages), vit_global(cfg.vit_global) {
    const int c = cfg.channels;
    if (vit_global) {
      intra_ln = LNParams<T>(c);
      intra_att = AttentionParams<T>(c, cfg.heads);
      ffn_ln_local = LNParams<T>(c);
      ffn = FFNParams<T>(c, cfg.ffn_ratio);
      return;
    }
    if (stages.intra) {
      intra_ln = LNParams<T>(c);
      intra_att = AttentionParams<T>(c, cfg.heads);
    }
    if (stages.inter) {
      inter_ln = LNParams<T>(c);
      inter_att = AttentionParams<T>(c, cfg.heads);
    }
    if (stages.lgi) {
      lgi_ln_q = LNParams<T>(c);
      lgi_ln_kv = LNParams<T>(c);
      lgi_att = AttentionParams<T>(c, cfg.heads);
      ffn_ln_rep = LNParams<T>(c);
    }
    ffn_ln_local = LNParams<T>(c);
    ffn = FFNParams<T>(c, cfg.ffn_ratio);
  }

  // Depth-scaled residual init: the output projections of deeper blocks
  // shrink by 1/sqrt(2(l+1)) so the residual stream stays input-dominated.
  void init(Rng& rng, int block_index = 0) {
    if (vit_global || stages.intra) intra_att.init(rng);
    if (!vit_global && stages.inter) inter_att.init(rng);
    if (!vit_global && stages.lgi) lgi_att.init(rng);
    ffn.init(rng);
    const T rescale = static_cast<T>(1.0 / std::sqrt(2.0 * (block_index + 1)));
    for (Matrix<T>* m : {&intra_att.w_o, &inter_att.w_o, &lgi_att.w_o, &ffn.w2})
      for (auto& v : m->data) v *= rescale;
  }

  void zero() {
    for (LNParams<T>* p : {&intra_ln, &inter_ln, &lgi_ln_q, &lgi_ln_kv, &ffn_ln_local, &ffn_ln_rep})
      p->zero();
    intra_att.zero();
    inter_att.zero();
    lgi_att.zero();
    ffn.zero();
  }

  void visit_params(std::vector<ParamRef<T>>& out, const std::string& prefix) {
    auto visit_ln = [&](LNParams<T>& p, const std::string& name) {
      add_param(out, prefix + name + ".gamma", p.gamma);
      add_param(out, prefix + name + ".beta", p.beta);
    };
    auto visit_att = [&](AttentionParams<T>& p, const std::string& name) {
      add_param(out, prefix + name + ".w_q", p.w_q);
      add_param(out, prefix + name + ".w_k", p.w_k);
      add_param(out, prefix + name + ".w_v", p.w_v);
      add_param(out, prefix + name + ".w_o", p.w_o);
      add_param(out, prefix + name + ".b_q", p.b_q);
      add_param(out, prefix + name + ".b_k", p.b_k);
      add_param(out, prefix + name + ".b_v", p.b_v);
      add_param(out, prefix + name + ".b_o", p.b_o);
    };
    if (vit_global || stages.intra) {
      visit_ln(intra_ln, vit_global ? "ln1" : "intra.ln");
      visit_att(intra_att, vit_global ? "attn" : "intra.attn");
    }
    if (!vit_global && stages.inter) {
      visit_ln(inter_ln, "inter.ln");
      visit_att(inter_att, "inter.attn");
    }
    if (!vit_global && stages.lgi) {
      visit_ln(lgi_ln_q, "lgi.ln_q");
      visit_ln(lgi_ln_kv, "lgi.ln_kv");
      visit_att(lgi_att, "lgi.attn");
      visit_ln(ffn_ln_rep, "ffn.ln_rep");
    }
    visit_ln(ffn_ln_local, vit_global ? "ln2" : "ffn.ln_local");
    add_param(out, prefix + "ffn.w1", ffn.w1);
    add_param(out, prefix + "ffn.b1", ffn.b1);
    add_param(out, prefix + "ffn.w2", ffn.w2);
    add_param(out, prefix + "ffn.b2", ffn.b2);
  }
};

template <typename T>
struct EncoderWeights {
  EncoderConfig cfg;
  EmbedParams<T> embed;
  Matrix<T> reps;  // [M, C]; empty in vit_global mode
  std::vector<BlockWeights<T>> blocks;

  EncoderWeights() = default;
  explicit EncoderWeights(const EncoderConfig& config) : cfg(config), embed(config.channels) {
    if (!cfg.vit_global) reps = Matrix<T>(cfg.num_regions(), cfg.channels);
    blocks.reserve(cfg.depth);
    for (int i = 0; i < cfg.depth; ++i) blocks.emplace_back(cfg);
  }

  void init(std::uint64_t seed) {
    Rng rng(seed, 17);
    embed.init(rng);
    for (auto& v : reps.data) v = static_cast<T>(rng.next_trunc_normal(0.02));
    for (size_t i = 0; i < blocks.size(); ++i) blocks[i].init(rng, static_cast<int>(i));
  }

  void zero() {
    embed.weight.zero();
    std::fill(embed.bias.begin(), embed.bias.end(), T(0));
    reps.zero();
    for (auto& b : blocks) b.zero();
  }

  void visit_params(std::vector<ParamRef<T>>& out, const std::string& prefix = "encoder.") {
    add_param(out, prefix + "embed.weight", embed.weight);
    add_param(out, prefix + "embed.bias", embed.bias);
    if (!cfg.vit_global) add_param(out, prefix + "reps", reps);
    for (size_t i = 0; i < blocks.size(); ++i)
      blocks[i].visit_params(out, prefix + "blocks." + std::to_string(i) + ".");
  }
};

// ---------------------------------------------------------------------------
// intra-region stage
//
// Locals live in one region-major [M*n, C] matrix. The stage stacks each
// region's representative token ahead of its rows, runs the shared QKV and
// output projections over the whole stack at once, and restricts the
// softmax attention to per-region row spans.

template <typename T>
struct IntraStageCache {
  int regions = 0;
  int seq = 0;  // rows per region including the representative token
  LNCache<T> ln;
  Matrix<T> q, k, v;             // [M*seq, C]
  std::vector<Matrix<T>> probs;  // per (region, head), [seq, seq]
  Matrix<T> heads_out;           // [M*seq, C]
};

namespace detail {

// [M*(n+1), C] stack of (rep_r, locals of region r).
template <typename T>
Matrix<T> stack_regions(const Matrix<T>& locals, int region_rows, const Matrix<T>& reps) {
  const int m = reps.rows, c = reps.cols, seq = region_rows + 1;
  Matrix<T> u(m * seq, c);
  for (int r = 0; r < m; ++r) {
    std::copy(reps.row(r), reps.row(r) + c, u.row(r * seq));
    std::copy(locals.row(r * region_rows), locals.row(r * region_rows) + static_cast<size_t>(region_rows) * c,
              u.row(r * seq + 1));
  }
  return u;
}

template <typename T>
void unstack_regions(const Matrix<T>& u, int region_rows, Matrix<T>& locals, Matrix<T>& reps) {
  const int m = reps.rows, c = reps.cols, seq = region_rows + 1;
  for (int r = 0; r < m; ++r) {
    std::copy(u.row(r * seq), u.row(r * seq) + c, reps.row(r));
    std::copy(u.row(r * seq + 1), u.row(r * seq + 1) + static_cast<size_t>(region_rows) * c,
              locals.row(r * region_rows));
  }
}

// Copies a [rows, d] head slice starting at (row0, col0).
template <typename T>
Matrix<T> slice_block(const Matrix<T>& m, int row0, int rows, int col0, int cols) {
  Matrix<T> out(rows, cols);
  for (int i = 0; i < rows; ++i)
    std::copy(m.row(row0 + i) + col0, m.row(row0 + i) + col0 + cols, out.row(i));
  return out;
}

template <typename T>
void paste_block(Matrix<T>& dst, const Matrix<T>& src, int row0, int col0) {
  for (int i = 0; i < src.rows; ++i)
    std::copy(src.row(i), src.row(i) + src.cols, dst.row(row0 + i) + col0);
}

template <typename T>
void add_block(Matrix<T>& dst, const Matrix<T>& src, int row0, int col0) {
  for (int i = 0; i < src.rows; ++i)
    for (int j = 0; j < src.cols; ++j) dst.at(row0 + i, col0 + j) += src.at(i, j);
}

}  // namespace detail

// Pre-LN self-attention over [rep_r; X_r] per region with shared
// projections, residual added in place.
template <typename T>
void intra_stage(Matrix<T>& locals, int region_rows, Matrix<T>& reps, const LNParams<T>& ln,
                 const AttentionParams<T>& p, IntraStageCache<T>* cache = nullptr) {
  const int m = reps.rows, c = reps.cols;
  const int seq = region_rows + 1;
  const int h = p.heads, d = c / h;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));

  Matrix<T> u = detail::stack_regions(locals, region_rows, reps);
  IntraStageCache<T> local_cache;
  IntraStageCache<T>* cc = cache != nullptr ? cache : &local_cache;
  cc->regions = m;
  cc->seq = seq;
  const Matrix<T> normed = layer_norm(u, ln, &cc->ln);
  cc->q = detail::linear(normed, p.w_q, p.b_q);
  cc->k = detail::linear(normed, p.w_k, p.b_k);
  cc->v = detail::linear(normed, p.w_v, p.b_v);

  cc->heads_out = Matrix<T>(m * seq, c);
  cc->probs.clear();
  cc->probs.reserve(static_cast<size_t>(m) * h);
  for (int r = 0; r < m; ++r)
    for (int j = 0; j < h; ++j) {
      const Matrix<T> qh = detail::slice_block(cc->q, r * seq, seq, j * d, d);
      const Matrix<T> kh = detail::slice_block(cc->k, r * seq, seq, j * d, d);
      const Matrix<T> vh = detail::slice_block(cc->v, r * seq, seq, j * d, d);
      Matrix<T> scores;
      matmul_nt(qh, kh, scores);
      scale_inplace(scores, scale);
      detail::softmax_rows(scores);
      Matrix<T> oh;
      matmul(scores, vh, oh);
      detail::paste_block(cc->heads_out, oh, r * seq, j * d);
      cc->probs.push_back(std::move(scores));
    }
  const Matrix<T> att = detail::linear(cc->heads_out, p.w_o, p.b_o);
  add_inplace(u, att);
  detail::unstack_regions(u, region_rows, locals, reps);
}

template <typename T>
void intra_stage_backward(Matrix<T>& dlocals, int region_rows, Matrix<T>& dreps,
                          const IntraStageCache<T>& cache, const LNParams<T>& ln,
                          const AttentionParams<T>& p, LNParams<T>& ln_grad,
                          AttentionParams<T>& grad) {
  if (cache.heads_out.rows == 0) throw MissingCache("intra_stage_backward: forward cache empty");
  const int m = cache.regions, seq = cache.seq;
  const int c = dreps.cols, h = p.heads, d = c / h;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));

  Matrix<T> du = detail::stack_regions(dlocals, region_rows, dreps);

  Matrix<T> dheads;
  matmul_nt(du, p.w_o, dheads);
  matmul_tn_acc(cache.heads_out, du, grad.w_o);
  for (int i = 0; i < du.rows; ++i)
    for (int j = 0; j < c; ++j) grad.b_o[j] += du.at(i, j);

  Matrix<T> dq(m * seq, c), dk(m * seq, c), dv(m * seq, c);
  for (int r = 0; r < m; ++r)
    for (int j = 0; j < h; ++j) {
      const Matrix<T>& probs = cache.probs[static_cast<size_t>(r) * h + j];
      const Matrix<T> qh = detail::slice_block(cache.q, r * seq, seq, j * d, d);
      const Matrix<T> kh = detail::slice_block(cache.k, r * seq, seq, j * d, d);
      const Matrix<T> vh = detail::slice_block(cache.v, r * seq, seq, j * d, d);
      const Matrix<T> doh = detail::slice_block(dheads, r * seq, seq, j * d, d);

      Matrix<T> dprobs;
      matmul_nt(doh, vh, dprobs);
      Matrix<T> dvh;
      matmul_tn(probs, doh, dvh);

      Matrix<T> dscores(seq, seq);
      for (int i = 0; i < seq; ++i) {
        const T* pr = probs.row(i);
        const T* dp = dprobs.row(i);
        double dot = 0.0;
        for (int t = 0; t < seq; ++t) dot += static_cast<double>(dp[t]) * pr[t];
        T* ds = dscores.row(i);
        for (int t = 0; t < seq; ++t) ds[t] = static_cast<T>(pr[t] * (dp[t] - dot) * scale);
      }
      Matrix<T> dqh;
      matmul(dscores, kh, dqh);
      Matrix<T> dkh;
      matmul_tn(dscores, qh, dkh);
      detail::paste_block(dq, dqh, r * seq, j * d);
      detail::paste_block(dk, dkh, r * seq, j * d);
      detail::paste_block(dv, dvh, r * seq, j * d);
    }

  Matrix<T> dnormed;
  matmul_nt(dq, p.w_q, dnormed);
  // Projection weight grads need the normalized input, recovered from the LN
  // cache: normed = xhat * gamma + beta.
  Matrix<T> normed(cache.ln.xhat.rows, c);
  for (int i = 0; i < normed.rows; ++i)
    for (int j = 0; j < c; ++j) normed.at(i, j) = cache.ln.xhat.at(i, j) * ln.gamma[j] + ln.beta[j];
  matmul_tn_acc(normed, dq, grad.w_q);
  {
    Matrix<T> tmp;
    matmul_nt(dk, p.w_k, tmp);
    add_inplace(dnormed, tmp);
    matmul_nt(dv, p.w_v, tmp);
    add_inplace(dnormed, tmp);
  }
  matmul_tn_acc(normed, dk, grad.w_k);
  matmul_tn_acc(normed, dv, grad.w_v);
  for (int i = 0; i < dq.rows; ++i)
    for (int j = 0; j < c; ++j) {
      grad.b_q[j] += dq.at(i, j);
      grad.b_k[j] += dk.at(i, j);
      grad.b_v[j] += dv.at(i, j);
    }

  const Matrix<T> dx = layer_norm_backward(dnormed, cache.ln, ln, ln_grad);
  add_inplace(du, dx);
  detail::unstack_regions(du, region_rows, dlocals, dreps);
}

// Single-region form used by the spec-level operation: one region's tokens
// plus its representative token.
template <typename T>
void intra_region_stage(Matrix<T>& local, Matrix<T>& rep, const LNParams<T>& ln,
                        const AttentionParams<T>& att, IntraStageCache<T>* cache = nullptr) {
  intra_stage(local, local.rows, rep, ln, att, cache);
}

// ---------------------------------------------------------------------------
// inter-region stage

template <typename T>
struct InterStageCache {
  LNCache<T> ln;
  AttentionCache<T> att;
};

template <typename T>
void inter_region_stage(Matrix<T>& reps, const LNParams<T>& ln, const AttentionParams<T>& att,
                        InterStageCache<T>* cache = nullptr) {
  InterStageCache<T> local_cache;
  InterStageCache<T>* c = cache != nullptr ? cache : &local_cache;
  const Matrix<T> normed = layer_norm(reps, ln, &c->ln);
  const Matrix<T> att_out = mhsa(normed, att, &c->att);
  add_inplace(reps, att_out);
}

template <typename T>
void inter_region_stage_backward(Matrix<T>& dreps, const InterStageCache<T>& cache,
                                 const LNParams<T>& ln, const AttentionParams<T>& att,
                                 LNParams<T>& ln_grad, AttentionParams<T>& att_grad) {
  const Matrix<T> dnormed = mhsa_backward(dreps, cache.att, att, att_grad);
  const Matrix<T> dx = layer_norm_backward(dnormed, cache.ln, ln, ln_grad);
  add_inplace(dreps, dx);
}

// ---------------------------------------------------------------------------
// block

template <typename T>
struct BlockCache {
  IntraStageCache<T> intra;
  InterStageCache<T> inter;
  LNCache<T> lgi_ln_q, lgi_ln_kv;
  AttentionCache<T> lgi_att;
  LNCache<T> ffn_ln_local;
  FFNCache<T> ffn_local;
  LNCache<T> ffn_ln_rep;
  FFNCache<T> ffn_rep;
};

// The local-global interaction of one block: every local token
// cross-attends to the full set of representative tokens, then the shared
// FFN updates locals and (when the stage is on) the representative tokens.
template <typename T>
void local_global_stage(Matrix<T>& locals, Matrix<T>& reps, BlockWeights<T>& w,
                        BlockCache<T>* cache = nullptr) {
  BlockCache<T> local_cache;
  BlockCache<T>* c = cache != nullptr ? cache : &local_cache;
  {
    const Matrix<T> q_normed = layer_norm(locals, w.lgi_ln_q, &c->lgi_ln_q);
    const Matrix<T> kv_normed = layer_norm(reps, w.lgi_ln_kv, &c->lgi_ln_kv);
    const Matrix<T> cross = mhca(q_normed, kv_normed, w.lgi_att, &c->lgi_att);
    add_inplace(locals, cross);
  }
  {
    const Matrix<T> normed = layer_norm(locals, w.ffn_ln_local, &c->ffn_ln_local);
    const Matrix<T> f = ffn(normed, w.ffn, &c->ffn_local);
    add_inplace(locals, f);
  }
  {
    const Matrix<T> normed = layer_norm(reps, w.ffn_ln_rep, &c->ffn_ln_rep);
    const Matrix<T> f = ffn(normed, w.ffn, &c->ffn_rep);
    add_inplace(reps, f);
  }
}

// Applies the enabled stages in order intra -> inter -> local-global. The
// FFN update of the local tokens runs in every variant; the representative
// tokens get their FFN update only when the local-global stage is on.
template <typename T>
void lgi_block(Matrix<T>& locals, int region_rows, Matrix<T>& reps, BlockWeights<T>& w,
               BlockCache<T>* cache = nullptr) {
  require_shape(reps.rows * region_rows == locals.rows, "lgi_block: locals rows != M * n");

  if (w.stages.intra)
    intra_stage(locals, region_rows, reps, w.intra_ln, w.intra_att,
                cache != nullptr ? &cache->intra : nullptr);

  if (w.stages.inter)
    inter_region_stage(reps, w.inter_ln, w.inter_att, cache != nullptr ? &cache->inter : nullptr);

  if (w.stages.lgi) {
    local_global_stage(locals, reps, w, cache);
  } else {
    BlockCache<T> local_cache;
    BlockCache<T>* c = cache != nullptr ? cache : &local_cache;
    const Matrix<T> normed = layer_norm(locals, w.ffn_ln_local, &c->ffn_ln_local);
    const Matrix<T> f = ffn(normed, w.ffn, &c->ffn_local);
    add_inplace(locals, f);
  }
}

template <typename T>
void lgi_block_backward(Matrix<T>& dlocals, int region_rows, Matrix<T>& dreps,
                        const BlockCache<T>& cache, BlockWeights<T>& w, BlockWeights<T>& grad) {
  if (w.stages.lgi) {
    const Matrix<T> dnormed = ffn_backward(dreps, cache.ffn_rep, w.ffn, grad.ffn);
    const Matrix<T> dx = layer_norm_backward(dnormed, cache.ffn_ln_rep, w.ffn_ln_rep, grad.ffn_ln_rep);
    add_inplace(dreps, dx);
  }
  {
    const Matrix<T> dnormed = ffn_backward(dlocals, cache.ffn_local, w.ffn, grad.ffn);
    const Matrix<T> dx =
        layer_norm_backward(dnormed, cache.ffn_ln_local, w.ffn_ln_local, grad.ffn_ln_local);
    add_inplace(dlocals, dx);
  }
  if (w.stages.lgi) {
    AttentionGrads<T> g = mhca_backward(dlocals, cache.lgi_att, w.lgi_att, grad.lgi_att);
    const Matrix<T> dq = layer_norm_backward(g.dxq, cache.lgi_ln_q, w.lgi_ln_q, grad.lgi_ln_q);
    add_inplace(dlocals, dq);
    const Matrix<T> ds = layer_norm_backward(g.dxkv, cache.lgi_ln_kv, w.lgi_ln_kv, grad.lgi_ln_kv);
    add_inplace(dreps, ds);
  }
  if (w.stages.inter)
    inter_region_stage_backward(dreps, cache.inter, w.inter_ln, w.inter_att, grad.inter_ln,
                                grad.inter_att);
  if (w.stages.intra)
    intra_stage_backward(dlocals, region_rows, dreps, cache.intra, w.intra_ln, w.intra_att,
                         grad.intra_ln, grad.intra_att);
}

// Standard pre-LN transformer block over one joint sequence; the ablation
// baseline with global space-time attention.
template <typename T>
void vit_block(Matrix<T>& x, BlockWeights<T>& w, BlockCache<T>* cache = nullptr) {
  BlockCache<T> local_cache;
  BlockCache<T>* c = cache != nullptr ? cache : &local_cache;
  {
    const Matrix<T> normed = layer_norm(x, w.intra_ln, &c->inter.ln);
    const Matrix<T> att_out = mhsa(normed, w.intra_att, &c->inter.att);
    add_inplace(x, att_out);
  }
  {
    const Matrix<T> normed = layer_norm(x, w.ffn_ln_local, &c->ffn_ln_local);
    const Matrix<T> f = ffn(normed, w.ffn, &c->ffn_local);
    add_inplace(x, f);
  }
}

template <typename T>
void vit_block_backward(Matrix<T>& dx, const BlockCache<T>& cache, BlockWeights<T>& w,
                        BlockWeights<T>& grad) {
  {
    const Matrix<T> dnormed = ffn_backward(dx, cache.ffn_local, w.ffn, grad.ffn);
    const Matrix<T> d =
        layer_norm_backward(dnormed, cache.ffn_ln_local, w.ffn_ln_local, grad.ffn_ln_local);
    add_inplace(dx, d);
  }
  {
    const Matrix<T> dnormed = mhsa_backward(dx, cache.inter.att, w.intra_att, grad.intra_att);
    const Matrix<T> d = layer_norm_backward(dnormed, cache.inter.ln, w.intra_ln, grad.intra_ln);
    add_inplace(dx, d);
  }
}

// ---------------------------------------------------------------------------
// encoder

template <typename T>
struct EncodeCache {
  std::vector<int> indices;  // flat grid index per local row, region-major
  int region_rows = 0;       // rows per region (0 in vit_global mode)
  std::vector<BlockCache<T>> blocks;
};

template <typename T>
struct EncodeResult {
  Matrix<T> locals;          // [L or K, C], canonical region-major order
  Matrix<T> reps;            // [M, C]
  std::vector<int> indices;  // flat grid index per local row
};

// Core of the encoder: runs the block stack over the region-major local
// token matrix plus the representative tokens. Exposed separately so
// structural properties (region-permutation equivariance) can be exercised
// directly.
template <typename T>
void encode_regions(Matrix<T>& locals, int region_rows, Matrix<T>& reps, EncoderWeights<T>& w,
                    std::vector<BlockCache<T>>* caches = nullptr) {
  if (caches != nullptr) caches->resize(w.blocks.size());
  for (size_t b = 0; b < w.blocks.size(); ++b)
    lgi_block(locals, region_rows, reps, w.blocks[b], caches != nullptr ? &(*caches)[b] : nullptr);
}

template <typename T>
void encode_regions_backward(Matrix<T>& dlocals, int region_rows, Matrix<T>& dreps,
                             std::vector<BlockCache<T>>& caches, EncoderWeights<T>& w,
                             EncoderWeights<T>& grad) {
  for (size_t b = w.blocks.size(); b-- > 0;)
    lgi_block_backward(dlocals, region_rows, dreps, caches[b], w.blocks[b], grad.blocks[b]);
}

// Full encoder pass over an embedded token grid: add fixed positions,
// partition into regions (gathering only visible tokens when a mask is
// given), seed every region with its representative token, run the stack.
template <typename T>
EncodeResult<T> encode(const TokenGrid<T>& grid, const RegionPartition& partition,
                       const TubeMask* mask, EncoderWeights<T>& w, EncodeCache<T>* cache = nullptr,
                       bool add_pos = true) {
  require_shape(grid.tokens.cols == w.cfg.channels, "encode: channel mismatch");
  Matrix<T> tokens = grid.tokens;
  if (add_pos) add_inplace(tokens, sincos_position_table<T>(grid.grid, w.cfg.channels));

  EncodeResult<T> out;
  if (w.cfg.vit_global) {
    // One joint sequence; canonical order is plain flat-grid order.
    std::vector<int> idx;
    if (mask != nullptr) {
      for (int i = 0; i < grid.grid.tokens(); ++i)
        if (mask->visible[i]) idx.push_back(i);
    } else {
      idx.resize(grid.grid.tokens());
      for (int i = 0; i < grid.grid.tokens(); ++i) idx[i] = i;
    }
    Matrix<T> x(static_cast<int>(idx.size()), tokens.cols);
    for (size_t i = 0; i < idx.size(); ++i)
      std::copy(tokens.row(idx[i]), tokens.row(idx[i]) + tokens.cols, x.row(static_cast<int>(i)));
    if (cache != nullptr) {
      cache->indices = idx;
      cache->region_rows = 0;
      cache->blocks.resize(w.blocks.size());
    }
    for (size_t b = 0; b < w.blocks.size(); ++b)
      vit_block(x, w.blocks[b], cache != nullptr ? &cache->blocks[b] : nullptr);
    out.locals = std::move(x);
    out.indices = std::move(idx);
    return out;
  }

  require_shape(partition.grid == grid.grid, "encode: partition grid mismatch");
  const int m = partition.num_regions();
  require_shape(w.reps.rows == m, "encode: representative token count mismatch");
  const std::vector<int> idx = visible_indices(partition, mask);

  int region_rows = partition.tokens_per_region();
  if (mask != nullptr) {
    std::vector<int> sizes(m, 0);
    for (int r = 0; r < m; ++r)
      for (int i : partition.region_token_indices(r)) sizes[r] += mask->visible[i] ? 1 : 0;
    for (int r = 1; r < m; ++r)
      if (sizes[r] != sizes[0])
        throw NonIntegralVisibleCount("encode: unequal visible counts across regions");
    region_rows = sizes[0];
  }

  Matrix<T> locals(static_cast<int>(idx.size()), tokens.cols);
  for (size_t i = 0; i < idx.size(); ++i)
    std::copy(tokens.row(idx[i]), tokens.row(idx[i]) + tokens.cols, locals.row(static_cast<int>(i)));
  Matrix<T> reps = w.reps;

  if (cache != nullptr) {
    cache->indices = idx;
    cache->region_rows = region_rows;
  }
  encode_regions(locals, region_rows, reps, w, cache != nullptr ? &cache->blocks : nullptr);

  out.locals = std::move(locals);
  out.reps = std::move(reps);
  out.indices = idx;
  return out;
}

// Backward mate of encode(): takes gradients on the canonical local output
// and the representative tokens, accumulates parameter gradients, returns
// the gradient w.r.t. the embedded token grid (zero at masked slots).
template <typename T>
Matrix<T> encode_backward(const Matrix<T>& dlocals_in, const Matrix<T>& dreps_in,
                          const GridShape& grid, EncodeCache<T>& cache, EncoderWeights<T>& w,
                          EncoderWeights<T>& grad) {
  Matrix<T> dtokens(grid.tokens(), w.cfg.channels);
  if (w.cfg.vit_global) {
    Matrix<T> dx = dlocals_in;
    for (size_t b = w.blocks.size(); b-- > 0;)
      vit_block_backward(dx, cache.blocks[b], w.blocks[b], grad.blocks[b]);
    for (size_t i = 0; i < cache.indices.size(); ++i)
      std::copy(dx.row(static_cast<int>(i)), dx.row(static_cast<int>(i)) + dx.cols,
                dtokens.row(cache.indices[i]));
    return dtokens;
  }

  Matrix<T> dlocals = dlocals_in;
  Matrix<T> dreps = dreps_in;
  if (dreps.rows == 0) dreps = Matrix<T>(w.reps.rows, w.reps.cols);
  encode_regions_backward(dlocals, cache.region_rows, dreps, cache.blocks, w, grad);
  add_inplace(grad.reps, dreps);

  for (size_t i = 0; i < cache.indices.size(); ++i)
    std::copy(dlocals.row(static_cast<int>(i)), dlocals.row(static_cast<int>(i)) + dlocals.cols,
              dtokens.row(cache.indices[i]));
  return dtokens;
}

template <typename T>
std::vector<T> pool_for_classification(const Matrix<T>& locals, const Matrix<T>& reps,
                                       PoolMode mode) {
  const Matrix<T>& src = mode == PoolMode::kRepresentativeMean ? reps : locals;
  require_shape(src.rows > 0, "pool_for_classification: empty pool source");
  std::vector<T> out(src.cols, T(0));
  for (int i = 0; i < src.rows; ++i)
    for (int j = 0; j < src.cols; ++j) out[j] += src.at(i, j);
  for (auto& v : out) v /= static_cast<T>(src.rows);
  return out;
}

}  // namespace lgmae
