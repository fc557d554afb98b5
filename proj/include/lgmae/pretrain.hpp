#pragma once

#include <vector>

#include "lgmae/encoder.hpp"
#include "lgmae/masking.hpp"
#include "lgmae/tokenizer.hpp"

namespace lgmae {

struct DecoderConfig {
  int depth = 4;
  int channels = 384;
  int heads = 6;
  int ffn_ratio = 4;
};

// Lightweight decoder: projection into the decoder width, the learnable
// mask token, fixed positional table over the full grid, then standard
// global-attention blocks. Discarded after pre-training.
template <typename T>
struct DecoderWeights {
  DecoderConfig cfg;
  int enc_channels = 0;
  Matrix<T> proj;            // [C_enc, C_d]
  std::vector<T> proj_b;     // [C_d]
  std::vector<T> mask_token;  // [C_d]
  std::vector<BlockWeights<T>> blocks;

  DecoderWeights() = default;
  DecoderWeights(const DecoderConfig& config, int encoder_channels)
      : cfg(config), enc_channels(encoder_channels), proj(encoder_channels, config.channels),
        proj_b(config.channels, T(0)), mask_token(config.channels, T(0)) {
    EncoderConfig shim;
    shim.channels = cfg.channels;
    shim.heads = cfg.heads;
    shim.ffn_ratio = cfg.ffn_ratio;
    shim.vit_global = true;
    blocks.reserve(cfg.depth);
    for (int i = 0; i < cfg.depth; ++i) blocks.emplace_back(shim);
  }

  void init(std::uint64_t seed) {
    Rng rng(seed, 23);
    const double proj_sd = std::sqrt(2.0 / (proj.rows + proj.cols));
    for (auto& v : proj.data) v = static_cast<T>(rng.next_trunc_normal(proj_sd));
    for (auto& v : mask_token) v = static_cast<T>(rng.next_trunc_normal(0.02));
    for (size_t i = 0; i < blocks.size(); ++i) blocks[i].init(rng, static_cast<int>(i));
  }

  void zero() {
    proj.zero();
    std::fill(proj_b.begin(), proj_b.end(), T(0));
    std::fill(mask_token.begin(), mask_token.end(), T(0));
    for (auto& b : blocks) b.zero();
  }

  void visit_params(std::vector<ParamRef<T>>& out, const std::string& prefix = "decoder.") {
    add_param(out, prefix + "proj.weight", proj);
    add_param(out, prefix + "proj.bias", proj_b);
    add_param(out, prefix + "mask_token", mask_token);
    for (size_t i = 0; i < blocks.size(); ++i)
      blocks[i].visit_params(out, prefix + "blocks." + std::to_string(i) + ".");
  }
};

// Shared-decoder output norm plus two linear heads: one predicts the first
// frame's pixels of each cube, the other the frame-difference patch.
template <typename T>
struct DualHeads {
  LNParams<T> ln;
  Matrix<T> w_app, w_mot;      // [C_d, 768]
  std::vector<T> b_app, b_mot;

  DualHeads() = default;
  explicit DualHeads(int channels)
      : ln(channels), w_app(channels, kPatchValues), w_mot(channels, kPatchValues),
        b_app(kPatchValues, T(0)), b_mot(kPatchValues, T(0)) {}

  void init(std::uint64_t seed) {
    Rng rng(seed, 29);
    const double sd = std::sqrt(2.0 / (w_app.rows + w_app.cols));
    for (auto& v : w_app.data) v = static_cast<T>(rng.next_trunc_normal(sd));
    for (auto& v : w_mot.data) v = static_cast<T>(rng.next_trunc_normal(sd));
  }

  void zero() {
    ln.zero();
    w_app.zero();
    w_mot.zero();
    std::fill(b_app.begin(), b_app.end(), T(0));
    std::fill(b_mot.begin(), b_mot.end(), T(0));
  }

  void visit_params(std::vector<ParamRef<T>>& out, const std::string& prefix = "heads.") {
    add_param(out, prefix + "ln.gamma", ln.gamma);
    add_param(out, prefix + "ln.beta", ln.beta);
    add_param(out, prefix + "appearance.weight", w_app);
    add_param(out, prefix + "appearance.bias", b_app);
    add_param(out, prefix + "motion.weight", w_mot);
    add_param(out, prefix + "motion.bias", b_mot);
  }
};

template <typename T>
struct PretrainModel {
  EncoderWeights<T> encoder;
  DecoderWeights<T> decoder;
  DualHeads<T> heads;

  PretrainModel() = default;
  PretrainModel(const EncoderConfig& enc_cfg, const DecoderConfig& dec_cfg)
      : encoder(enc_cfg), decoder(dec_cfg, enc_cfg.channels), heads(dec_cfg.channels) {}

  void init(std::uint64_t seed) {
    encoder.init(seed);
    decoder.init(seed);
    heads.init(seed);
  }

  void zero() {
    encoder.zero();
    decoder.zero();
    heads.zero();
  }

  void visit_params(std::vector<ParamRef<T>>& out) {
    encoder.visit_params(out);
    decoder.visit_params(out);
    heads.visit_params(out);
  }
};

// ---------------------------------------------------------------------------
// decode / predict

template <typename T>
struct DecodeCache {
  Matrix<T> visible_in;          // encoder outputs entering the projection
  std::vector<int> scatter_idx;  // grid slot of each visible row
  std::vector<BlockCache<T>> blocks;
};

template <typename T>
Matrix<T> decode(const Matrix<T>& visible_encoded, const TubeMask& mask, const RegionPartition& p,
                 DecoderWeights<T>& w, DecodeCache<T>* cache = nullptr) {
  require_shape(visible_encoded.cols == w.enc_channels, "decode: encoder channel mismatch");
  Matrix<T> z;
  matmul(visible_encoded, w.proj, z);
  add_row_inplace(z, w.proj_b);
  const Matrix<T> pos = sincos_position_table<T>(mask.grid, w.cfg.channels);
  Matrix<T> x = scatter_with_mask_tokens(z, mask, p, w.mask_token, pos);
  if (cache != nullptr) {
    cache->visible_in = visible_encoded;
    cache->scatter_idx = visible_indices(p, &mask);
    cache->blocks.resize(w.blocks.size());
  }
  for (size_t b = 0; b < w.blocks.size(); ++b)
    vit_block(x, w.blocks[b], cache != nullptr ? &cache->blocks[b] : nullptr);
  return x;
}

template <typename T>
Matrix<T> decode_backward(const Matrix<T>& ddecoded, const DecodeCache<T>& cache,
                          DecoderWeights<T>& w, DecoderWeights<T>& grad) {
  Matrix<T> dx = ddecoded;
  for (size_t b = w.blocks.size(); b-- > 0;)
    vit_block_backward(dx, cache.blocks[b], w.blocks[b], grad.blocks[b]);

  // Scatter backward: visible slots feed the projection; every other slot
  // feeds the shared mask token.
  std::vector<std::uint8_t> is_visible(dx.rows, 0);
  Matrix<T> dz(static_cast<int>(cache.scatter_idx.size()), w.cfg.channels);
  for (size_t i = 0; i < cache.scatter_idx.size(); ++i) {
    is_visible[cache.scatter_idx[i]] = 1;
    std::copy(dx.row(cache.scatter_idx[i]), dx.row(cache.scatter_idx[i]) + dx.cols,
              dz.row(static_cast<int>(i)));
  }
  for (int i = 0; i < dx.rows; ++i)
    if (!is_visible[i])
      for (int j = 0; j < dx.cols; ++j) grad.mask_token[j] += dx.at(i, j);

  Matrix<T> dvisible;
  matmul_nt(dz, w.proj, dvisible);
  matmul_tn_acc(cache.visible_in, dz, grad.proj);
  for (int i = 0; i < dz.rows; ++i)
    for (int j = 0; j < dz.cols; ++j) grad.proj_b[j] += dz.at(i, j);
  return dvisible;
}

template <typename T>
struct PredictCache {
  LNCache<T> ln;
  Matrix<T> normed;
};

template <typename T>
struct Predictions {
  Matrix<T> appearance;  // [K, 768]
  Matrix<T> motion;      // [K, 768]
};

template <typename T>
Predictions<T> predict(const Matrix<T>& decoded, DualHeads<T>& heads, PredictCache<T>* cache = nullptr) {
  PredictCache<T> local;
  PredictCache<T>* c = cache != nullptr ? cache : &local;
  c->normed = layer_norm(decoded, heads.ln, &c->ln);
  Predictions<T> out;
  matmul(c->normed, heads.w_app, out.appearance);
  add_row_inplace(out.appearance, heads.b_app);
  matmul(c->normed, heads.w_mot, out.motion);
  add_row_inplace(out.motion, heads.b_mot);
  return out;
}

template <typename T>
Matrix<T> predict_backward(const Matrix<T>& dapp, const Matrix<T>& dmot, const PredictCache<T>& cache,
                           DualHeads<T>& heads, DualHeads<T>& grad) {
  Matrix<T> dnormed;
  matmul_nt(dapp, heads.w_app, dnormed);
  Matrix<T> dn2;
  matmul_nt(dmot, heads.w_mot, dn2);
  add_inplace(dnormed, dn2);

  matmul_tn_acc(cache.normed, dapp, grad.w_app);
  matmul_tn_acc(cache.normed, dmot, grad.w_mot);
  for (int i = 0; i < dapp.rows; ++i)
    for (int j = 0; j < dapp.cols; ++j) {
      grad.b_app[j] += dapp.at(i, j);
      grad.b_mot[j] += dmot.at(i, j);
    }
  return layer_norm_backward(dnormed, cache.ln, heads.ln, grad.ln);
}

// ---------------------------------------------------------------------------
// loss

// Mean squared error over masked token slots only, divided by the number of
// masked elements (count * 768).
template <typename T>
double masked_mse(const Matrix<T>& pred, const Matrix<T>& target, const TubeMask& mask) {
  require_shape(pred.same_shape(target), "masked_mse: pred/target shapes differ");
  require_shape(pred.rows == mask.grid.tokens(), "masked_mse: row count != grid tokens");
  double sum = 0.0;
  int masked = 0;
  for (int i = 0; i < pred.rows; ++i) {
    if (mask.visible[i]) continue;
    ++masked;
    const T* a = pred.row(i);
    const T* b = target.row(i);
    for (int j = 0; j < pred.cols; ++j) {
      const double d = static_cast<double>(a[j]) - b[j];
      sum += d * d;
    }
  }
  require_shape(masked > 0, "masked_mse: mask has no masked positions");
  return sum / (static_cast<double>(masked) * pred.cols);
}

// d(masked_mse)/d(pred), scaled by `weight`. Zero rows at visible slots.
template <typename T>
Matrix<T> masked_mse_backward(const Matrix<T>& pred, const Matrix<T>& target, const TubeMask& mask,
                              double weight) {
  int masked = 0;
  for (int i = 0; i < pred.rows; ++i) masked += mask.visible[i] ? 0 : 1;
  const double scale = 2.0 * weight / (static_cast<double>(masked) * pred.cols);
  Matrix<T> out(pred.rows, pred.cols);
  for (int i = 0; i < pred.rows; ++i) {
    if (mask.visible[i]) continue;
    const T* a = pred.row(i);
    const T* b = target.row(i);
    T* o = out.row(i);
    for (int j = 0; j < pred.cols; ++j)
      o[j] = static_cast<T>(scale * (static_cast<double>(a[j]) - b[j]));
  }
  return out;
}

struct PretrainLossReport {
  double total = 0.0;
  double appearance_mse = 0.0;
  double motion_mse = 0.0;
  double lambda = 0.5;
};

template <typename T>
struct PretrainCache {
  Matrix<T> patches;  // [K, 1536]
  TubeMask mask;
  EncodeCache<T> enc;
  Matrix<T> enc_locals;
  DecodeCache<T> dec;
  Matrix<T> decoded;
  PredictCache<T> pred;
  Predictions<T> predictions;
  Matrix<T> app_target, mot_target;
};

// Full pre-training pipeline for one clip: tokenize, encode the visible
// tokens, decode all slots, predict both targets, combine the two masked
// MSEs with weight lambda.
template <typename T>
PretrainLossReport pretrain_forward(PretrainModel<T>& model, const VideoClip<T>& clip,
                                    const RegionPartition& partition, const TubeMask& mask,
                                    double lambda, TargetNorm norm, PretrainCache<T>* cache = nullptr) {
  require_shape(lambda >= 0.0 && lambda <= 1.0, "pretrain_forward: lambda outside [0,1]");
  PretrainCache<T> local;
  PretrainCache<T>* c = cache != nullptr ? cache : &local;
  c->mask = mask;

  c->patches = cube_patches(clip);
  TokenGrid<T> grid;
  grid.grid = grid_for_clip(clip.frames, clip.height, clip.width);
  matmul(c->patches, model.encoder.embed.weight, grid.tokens);
  add_row_inplace(grid.tokens, model.encoder.embed.bias);

  EncodeResult<T> enc = encode(grid, partition, &mask, model.encoder, &c->enc);
  c->enc_locals = std::move(enc.locals);
  c->decoded = decode(c->enc_locals, mask, partition, model.decoder, &c->dec);
  c->predictions = predict(c->decoded, model.heads, &c->pred);

  const ReconTargets<T> targets = normalize_targets(build_targets(clip), norm);
  patchify_targets(targets, c->app_target, c->mot_target);

  PretrainLossReport report;
  report.lambda = lambda;
  report.appearance_mse = masked_mse(c->predictions.appearance, c->app_target, mask);
  report.motion_mse = masked_mse(c->predictions.motion, c->mot_target, mask);
  report.total = lambda * report.appearance_mse + (1.0 - lambda) * report.motion_mse;
  return report;
}

// Accumulates parameter gradients of the weighted loss into `grads`.
template <typename T>
void pretrain_backward(PretrainCache<T>& cache, PretrainModel<T>& model, PretrainModel<T>& grads,
                       double lambda) {
  const Matrix<T> dapp =
      masked_mse_backward(cache.predictions.appearance, cache.app_target, cache.mask, lambda);
  const Matrix<T> dmot =
      masked_mse_backward(cache.predictions.motion, cache.mot_target, cache.mask, 1.0 - lambda);

  const Matrix<T> ddecoded = predict_backward(dapp, dmot, cache.pred, model.heads, grads.heads);
  const Matrix<T> dvisible = decode_backward(ddecoded, cache.dec, model.decoder, grads.decoder);

  const GridShape grid{cache.mask.grid.t, cache.mask.grid.h, cache.mask.grid.w};
  const Matrix<T> dreps;  // representative tokens take no loss directly
  const Matrix<T> dtokens =
      encode_backward(dvisible, dreps, grid, cache.enc, model.encoder, grads.encoder);

  matmul_tn_acc(cache.patches, dtokens, grads.encoder.embed.weight);
  for (int i = 0; i < dtokens.rows; ++i)
    for (int j = 0; j < dtokens.cols; ++j) grads.encoder.embed.bias[j] += dtokens.at(i, j);
}

// ---------------------------------------------------------------------------
// stitching

// Rebuilds a full clip from per-token predictions: even frames take the
// appearance patches, odd frames add the motion patches on top. Normalized
// predictions are inverted with the stats recorded on the targets. Visible
// slots can be filled from the ground-truth targets instead.
template <typename T>
VideoClip<T> stitch_reconstruction(const Matrix<T>& app_pred, const Matrix<T>& mot_pred,
                                   const ReconTargets<T>& targets, const TubeMask& mask,
                                   bool fill_visible_from_truth) {
  const int gh = targets.height / kPatchSize, gw = targets.width / kPatchSize;
  const int k_total = targets.frames * gh * gw;
  require_shape(app_pred.rows == k_total && mot_pred.rows == k_total,
                "stitch_reconstruction: prediction rows != token count");

  Matrix<T> app = app_pred, mot = mot_pred;
  if (targets.normalized) {
    for (int k = 0; k < k_total; ++k) {
      const double as = targets.app_std[k] + kNormEps, am = targets.app_mean[k];
      const double ms = targets.mot_std[k] + kNormEps, mm = targets.mot_mean[k];
      for (int j = 0; j < kPatchValues; ++j) {
        app.at(k, j) = static_cast<T>(app.at(k, j) * as + am);
        mot.at(k, j) = static_cast<T>(mot.at(k, j) * ms + mm);
      }
    }
  }
  if (fill_visible_from_truth) {
    const ReconTargets<T> raw = denormalize_targets(targets);
    Matrix<T> app_t, mot_t;
    patchify_targets(raw, app_t, mot_t);
    for (int k = 0; k < k_total; ++k)
      if (mask.visible[k]) {
        std::copy(app_t.row(k), app_t.row(k) + kPatchValues, app.row(k));
        std::copy(mot_t.row(k), mot_t.row(k) + kPatchValues, mot.row(k));
      }
  }

  VideoClip<T> clip(targets.frames * 2, targets.height, targets.width);
  int k = 0;
  for (int tc = 0; tc < targets.frames; ++tc)
    for (int ph = 0; ph < gh; ++ph)
      for (int pw = 0; pw < gw; ++pw, ++k) {
        const T* a = app.row(k);
        const T* m = mot.row(k);
        int o = 0;
        for (int y = 0; y < kPatchSize; ++y)
          for (int x = 0; x < kPatchSize; ++x)
            for (int c = 0; c < kChannels; ++c, ++o) {
              clip.at(2 * tc, ph * kPatchSize + y, pw * kPatchSize + x, c) = a[o];
              clip.at(2 * tc + 1, ph * kPatchSize + y, pw * kPatchSize + x, c) = a[o] + m[o];
            }
      }
  return clip;
}

}  // namespace lgmae
