#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "lgmae/encoder.hpp"
#include "lgmae/pretrain.hpp"

namespace lgmae {

// Parameter and FLOP accounting. Convention: one multiply-accumulate counts
// as one FLOP, the usual reporting convention for vision transformer tables;
// softmax/LN/GELU work is tallied separately in aux_flops. The flops
// formulas mirror the matmul calls in the forward path one-to-one, so
// instrumented MAC counts must agree exactly.
struct CostReport {
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
  std::map<std::string, std::uint64_t> params_by_stage;
  std::map<std::string, std::uint64_t> flops_by_stage;
  std::uint64_t aux_flops = 0;  // softmax, layer norm, activation work

  void add_params(const std::string& stage, std::uint64_t n) {
    params += n;
    params_by_stage[stage] += n;
  }
  void add_flops(const std::string& stage, std::uint64_t n) {
    flops += n;
    flops_by_stage[stage] += n;
  }
};

namespace costs {

inline std::uint64_t attention_params(std::uint64_t c) { return 4 * c * c + 4 * c; }
inline std::uint64_t ln_params(std::uint64_t c) { return 2 * c; }
inline std::uint64_t ffn_params(std::uint64_t c, std::uint64_t r) {
  return 2 * r * c * c + r * c + c;
}

// Self-attention over n rows: QKV and output projections plus the two
// quadratic score/value products.
inline std::uint64_t mhsa_flops(std::uint64_t n, std::uint64_t c) {
  return 4 * n * c * c + 2 * n * n * c;
}

}  // namespace costs

// Exact symbolic parameter count from the configured shapes. num_classes > 0
// adds the classifier package (pool norm + linear head).
inline CostReport count_params(const EncoderConfig& cfg, int num_classes = 0) {
  CostReport r;
  const std::uint64_t c = cfg.channels;
  r.add_params("embed", kCubeValues * c + c);
  if (!cfg.vit_global) r.add_params("reps", static_cast<std::uint64_t>(cfg.num_regions()) * c);
  for (int b = 0; b < cfg.depth; ++b) {
    if (cfg.vit_global || cfg.stages.intra)
      r.add_params("intra", costs::attention_params(c) + costs::ln_params(c));
    if (!cfg.vit_global && cfg.stages.inter)
      r.add_params("inter", costs::attention_params(c) + costs::ln_params(c));
    if (!cfg.vit_global && cfg.stages.lgi)
      r.add_params("lgi", costs::attention_params(c) + 3 * costs::ln_params(c));  // ln_q, ln_kv, rep-FFN LN
    r.add_params("ffn", costs::ffn_params(c, cfg.ffn_ratio) + costs::ln_params(c));
  }
  if (num_classes > 0)
    r.add_params("head", costs::ln_params(c) + c * static_cast<std::uint64_t>(num_classes) +
                             num_classes);
  return r;
}

inline CostReport count_params(const EncoderConfig& enc, const DecoderConfig& dec) {
  CostReport r = count_params(enc, 0);
  const std::uint64_t cd = dec.channels;
  std::uint64_t d = static_cast<std::uint64_t>(enc.channels) * cd + cd;  // projection
  d += cd;                                                               // mask token
  for (int b = 0; b < dec.depth; ++b)
    d += costs::attention_params(cd) + costs::ffn_params(cd, dec.ffn_ratio) + 2 * costs::ln_params(cd);
  d += costs::ln_params(cd) + 2 * (cd * static_cast<std::uint64_t>(kPatchValues) + kPatchValues);
  r.add_params("decoder", d);
  return r;
}

namespace detail {

// Approximate elementwise work, reported separately from matmul FLOPs:
// LN ~ 5 ops/element, softmax ~ 5 ops/score, GELU ~ 10 ops/element.
inline std::uint64_t ln_aux(std::uint64_t rows, std::uint64_t c) { return 5 * rows * c; }
inline std::uint64_t softmax_aux(std::uint64_t rows, std::uint64_t cols) { return 5 * rows * cols; }
inline std::uint64_t gelu_aux(std::uint64_t rows, std::uint64_t hidden) { return 10 * rows * hidden; }

}  // namespace detail

// Forward FLOPs of the encoder on the given grid. visible_total < 0 means no
// masking (the fine-tuning sequence lengths the paper's tables use);
// otherwise only visible_total tokens enter the blocks, split evenly over
// regions. num_classes > 0 adds the classifier head.
inline CostReport count_flops(const EncoderConfig& cfg, GridShape grid, int visible_total = -1,
                              int num_classes = 0) {
  CostReport r;
  const std::uint64_t c = cfg.channels;
  const std::uint64_t k_full = grid.tokens();
  r.add_flops("embed", k_full * kCubeValues * c);

  if (cfg.vit_global) {
    const std::uint64_t seq = visible_total >= 0 ? static_cast<std::uint64_t>(visible_total) : k_full;
    for (int b = 0; b < cfg.depth; ++b) {
      r.add_flops("attn_global", costs::mhsa_flops(seq, c));
      r.add_flops("ffn", 8 * seq * c * c);
      r.aux_flops += detail::ln_aux(2 * seq, c) + detail::softmax_aux(seq * cfg.heads, seq) +
                     detail::gelu_aux(seq, cfg.ffn_ratio * c);
    }
  } else {
    const RegionPartition p = make_partition(grid, cfg.region);
    const std::uint64_t m = p.num_regions();
    require_shape(visible_total < 0 || visible_total % m == 0,
                  "count_flops: visible_total must split evenly over regions");
    const std::uint64_t n = visible_total >= 0 ? visible_total / m : p.tokens_per_region();
    const std::uint64_t local_total = m * n;
    for (int b = 0; b < cfg.depth; ++b) {
      if (cfg.stages.intra) {
        r.add_flops("intra", m * costs::mhsa_flops(n + 1, c));
        r.aux_flops += m * (detail::ln_aux(n + 1, c) +
                            detail::softmax_aux((n + 1) * cfg.heads, n + 1));
      }
      if (cfg.stages.inter) {
        r.add_flops("inter", costs::mhsa_flops(m, c));
        r.aux_flops += detail::ln_aux(m, c) + detail::softmax_aux(m * cfg.heads, m);
      }
      if (cfg.stages.lgi) {
        // Shared K/V projections over the reps, per-region query path.
        r.add_flops("lgi", 2 * m * c * c + local_total * (2 * c * c) + 2 * local_total * m * c);
        r.aux_flops += detail::ln_aux(m + local_total, c) +
                       detail::softmax_aux(local_total * cfg.heads, m);
      }
      r.add_flops("ffn", 8 * local_total * c * c);
      r.aux_flops += detail::ln_aux(local_total, c) + detail::gelu_aux(local_total, cfg.ffn_ratio * c);
      if (cfg.stages.lgi) {
        r.add_flops("ffn", 8 * m * c * c);
        r.aux_flops += detail::ln_aux(m, c) + detail::gelu_aux(m, cfg.ffn_ratio * c);
      }
    }
  }
  if (num_classes > 0) {
    r.add_flops("head", c * static_cast<std::uint64_t>(num_classes));
    r.aux_flops += detail::ln_aux(1, c);
  }
  return r;
}

// Decoder cost during pre-training: projection of the L visible tokens, full
// K-slot global blocks, two prediction heads.
inline CostReport count_decoder_flops(const DecoderConfig& cfg, int enc_channels, GridShape grid,
                                      int visible_total) {
  CostReport r;
  const std::uint64_t cd = cfg.channels;
  const std::uint64_t k_full = grid.tokens();
  std::uint64_t f = static_cast<std::uint64_t>(visible_total) * enc_channels * cd;
  for (int b = 0; b < cfg.depth; ++b) {
    f += costs::mhsa_flops(k_full, cd) + 8 * k_full * cd * cd;
    r.aux_flops += detail::ln_aux(2 * k_full, cd) + detail::softmax_aux(k_full * cfg.heads, k_full) +
                   detail::gelu_aux(k_full, cfg.ffn_ratio * cd);
  }
  f += 2 * k_full * cd * kPatchValues;
  r.aux_flops += detail::ln_aux(k_full, cd);
  r.add_flops("decoder", f);
  return r;
}

// Quadratic score/value attention terms only, the O(.) subject of the
// block-complexity analysis.
inline std::uint64_t quadratic_attention_flops(const EncoderConfig& cfg, GridShape grid,
                                               int visible_total = -1) {
  const std::uint64_t c = cfg.channels;
  if (cfg.vit_global) {
    const std::uint64_t seq = visible_total >= 0 ? visible_total : grid.tokens();
    return static_cast<std::uint64_t>(cfg.depth) * 2 * seq * seq * c;
  }
  const RegionPartition p = make_partition(grid, cfg.region);
  const std::uint64_t m = p.num_regions();
  const std::uint64_t n = visible_total >= 0 ? visible_total / m : p.tokens_per_region();
  std::uint64_t per_block = 0;
  if (cfg.stages.intra) per_block += m * 2 * (n + 1) * (n + 1) * c;
  if (cfg.stages.inter) per_block += 2 * m * m * c;
  if (cfg.stages.lgi) per_block += 2 * (m * n) * m * c;
  return static_cast<std::uint64_t>(cfg.depth) * per_block;
}

// The asymptotic ratio of LGI block attention cost to global attention,
// (1/M + 1/N^2 + 1/N).
inline double attention_complexity_ratio(int m, int n) {
  require_shape(m >= 1 && n >= 1, "attention_complexity_ratio: M, N >= 1");
  const double md = m, nd = n;
  return 1.0 / md + 1.0 / (nd * nd) + 1.0 / nd;
}

// Same ratio with the +1 representative token retained in the intra term;
// this is what instrumented counts reproduce exactly.
inline double attention_quadratic_ratio_exact(int m, int n) {
  const double k = static_cast<double>(m) * n;
  return (static_cast<double>(m) * (n + 1) * (n + 1) + static_cast<double>(m) * m +
          static_cast<double>(m) * m * n) /
         (k * k);
}

// Runs fn with multiply-accumulate instrumentation enabled and returns the
// observed count.
template <typename Fn>
std::uint64_t measure_macs(Fn&& fn) {
  const bool was_enabled = MacCounter::enabled;
  MacCounter::enabled = true;
  MacCounter::reset();
  fn();
  const std::uint64_t macs = MacCounter::macs;
  MacCounter::enabled = was_enabled;
  return macs;
}

}  // namespace lgmae
