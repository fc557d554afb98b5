#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "lgmae/encoder.hpp"
#include "lgmae/tokenizer.hpp"

namespace lgmae {

struct LabelOutOfRange : std::runtime_error {
  explicit LabelOutOfRange(const std::string& w) : std::runtime_error(w) {}
};
struct EmptyInput : std::runtime_error {
  explicit EmptyInput(const std::string& w) : std::runtime_error(w) {}
};

// Pool -> LN -> linear. Zero-initialized linear keeps the start of
// fine-tuning stable; only the encoder carries pre-trained weights.
template <typename T>
struct ClassifierHead {
  PoolMode pool = PoolMode::kRepresentativeMean;
  LNParams<T> fc_norm;
  Matrix<T> weight;     // [C, num_classes]
  std::vector<T> bias;  // [num_classes]

  ClassifierHead() = default;
  ClassifierHead(int channels, int num_classes, PoolMode mode)
      : pool(mode), fc_norm(channels), weight(channels, num_classes), bias(num_classes, T(0)) {
    require_shape(num_classes >= 2, "ClassifierHead: need at least 2 classes");
  }

  int num_classes() const { return weight.cols; }

  void visit_params(std::vector<ParamRef<T>>& out, const std::string& prefix = "head.") {
    add_param(out, prefix + "fc_norm.gamma", fc_norm.gamma);
    add_param(out, prefix + "fc_norm.beta", fc_norm.beta);
    add_param(out, prefix + "weight", weight);
    add_param(out, prefix + "bias", bias);
  }

  void zero() {
    fc_norm.zero();
    weight.zero();
    std::fill(bias.begin(), bias.end(), T(0));
  }
};

template <typename T>
struct FinetuneModel {
  EncoderWeights<T> encoder;
  ClassifierHead<T> head;

  FinetuneModel() = default;
  FinetuneModel(const EncoderConfig& cfg, int num_classes)
      : encoder(cfg), head(cfg.channels, num_classes, cfg.pool) {}

  void init(std::uint64_t seed) { encoder.init(seed); }

  void zero() {
    encoder.zero();
    head.zero();
  }

  void visit_params(std::vector<ParamRef<T>>& out) {
    encoder.visit_params(out);
    head.visit_params(out);
  }
};

template <typename T>
std::vector<T> softmax_vector(const std::vector<T>& logits) {
  T mx = logits[0];
  for (T v : logits) mx = std::max(mx, v);
  std::vector<T> out(logits.size());
  double sum = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    out[i] = static_cast<T>(std::exp(static_cast<double>(logits[i] - mx)));
    sum += out[i];
  }
  for (auto& v : out) v = static_cast<T>(v / sum);
  return out;
}

template <typename T>
struct ClassifyCache {
  EncodeCache<T> enc;
  Matrix<T> patches;
  Matrix<T> locals, reps;
  Matrix<T> pooled;  // [1, C]
  LNCache<T> fc_ln;
  Matrix<T> normed;
  std::vector<T> logits;
};

template <typename T>
std::vector<T> classify_forward(FinetuneModel<T>& model, const VideoClip<T>& clip,
                                const RegionPartition& partition, ClassifyCache<T>* cache = nullptr) {
  ClassifyCache<T> local;
  ClassifyCache<T>* c = cache != nullptr ? cache : &local;
  c->patches = cube_patches(clip);
  TokenGrid<T> grid;
  grid.grid = grid_for_clip(clip.frames, clip.height, clip.width);
  matmul(c->patches, model.encoder.embed.weight, grid.tokens);
  add_row_inplace(grid.tokens, model.encoder.embed.bias);

  EncodeResult<T> enc = encode(grid, partition, nullptr, model.encoder, &c->enc);
  c->locals = std::move(enc.locals);
  c->reps = std::move(enc.reps);

  const std::vector<T> pooled_vec = pool_for_classification(c->locals, c->reps, model.head.pool);
  c->pooled = Matrix<T>(1, static_cast<int>(pooled_vec.size()));
  std::copy(pooled_vec.begin(), pooled_vec.end(), c->pooled.row(0));
  c->normed = layer_norm(c->pooled, model.head.fc_norm, &c->fc_ln);

  Matrix<T> logits;
  matmul(c->normed, model.head.weight, logits);
  add_row_inplace(logits, model.head.bias);
  c->logits.assign(logits.row(0), logits.row(0) + logits.cols);
  return c->logits;
}

template <typename T>
double cross_entropy(const std::vector<T>& logits, int label) {
  if (label < 0 || label >= static_cast<int>(logits.size()))
    throw LabelOutOfRange("cross_entropy: label " + std::to_string(label) + " of " +
                          std::to_string(logits.size()) + " classes");
  double mx = logits[0];
  for (T v : logits) mx = std::max(mx, static_cast<double>(v));
  double lse = 0.0;
  for (T v : logits) lse += std::exp(static_cast<double>(v) - mx);
  return std::log(lse) + mx - logits[label];
}

// Cross-entropy backward through head, pooling and encoder; accumulates into
// `grads`. With freeze_encoder only the head receives gradients.
template <typename T>
void classify_backward(ClassifyCache<T>& cache, int label, FinetuneModel<T>& model,
                       FinetuneModel<T>& grads, bool freeze_encoder = false) {
  const std::vector<T> probs = softmax_vector(cache.logits);
  std::vector<T> dlogits(probs);
  dlogits[label] -= T(1);

  Matrix<T> dnormed(1, cache.normed.cols);
  for (int j = 0; j < static_cast<int>(dlogits.size()); ++j) {
    grads.head.bias[j] += dlogits[j];
    for (int k = 0; k < cache.normed.cols; ++k) {
      grads.head.weight.at(k, j) += cache.normed.at(0, k) * dlogits[j];
      dnormed.at(0, k) += model.head.weight.at(k, j) * dlogits[j];
    }
  }
  const Matrix<T> dpooled =
      layer_norm_backward(dnormed, cache.fc_ln, model.head.fc_norm, grads.head.fc_norm);
  if (freeze_encoder) return;

  Matrix<T> dlocals(cache.locals.rows, cache.locals.cols);
  Matrix<T> dreps(cache.reps.rows, cache.reps.cols > 0 ? cache.reps.cols : cache.locals.cols);
  if (model.head.pool == PoolMode::kRepresentativeMean) {
    for (int i = 0; i < dreps.rows; ++i)
      for (int j = 0; j < dreps.cols; ++j) dreps.at(i, j) = dpooled.at(0, j) / cache.reps.rows;
  } else {
    for (int i = 0; i < dlocals.rows; ++i)
      for (int j = 0; j < dlocals.cols; ++j) dlocals.at(i, j) = dpooled.at(0, j) / cache.locals.rows;
  }

  const GridShape grid = model.encoder.cfg.grid;
  const Matrix<T> dtokens =
      encode_backward(dlocals, dreps, grid, cache.enc, model.encoder, grads.encoder);
  matmul_tn_acc(cache.patches, dtokens, grads.encoder.embed.weight);
  for (int i = 0; i < dtokens.rows; ++i)
    for (int j = 0; j < dtokens.cols; ++j) grads.encoder.embed.bias[j] += dtokens.at(i, j);
}

// Softmax scores averaged over num_clips clips sampled at uniform temporal
// offsets (centered when a single clip is requested).
template <typename T>
std::vector<T> infer_video(FinetuneModel<T>& model, const VideoClip<T>& video,
                           const RegionPartition& partition, int num_frames, int stride,
                           int num_clips = 2) {
  const int span = (num_frames - 1) * stride + 1;
  if (video.frames < span)
    throw OutOfRange("infer_video: video shorter than one clip span");
  const int max_off = video.frames - span;
  std::vector<T> mean;
  for (int i = 0; i < num_clips; ++i) {
    const int off = num_clips == 1
                        ? max_off / 2
                        : static_cast<int>(std::llround(static_cast<double>(i) * max_off /
                                                        (num_clips - 1)));
    const VideoClip<T> clip = sample_clip(video, num_frames, stride, off);
    const std::vector<T> scores = softmax_vector(classify_forward(model, clip, partition));
    if (mean.empty())
      mean = scores;
    else
      for (size_t j = 0; j < mean.size(); ++j) mean[j] += scores[j];
  }
  for (auto& v : mean) v = static_cast<T>(v / num_clips);
  return mean;
}

// ---------------------------------------------------------------------------
// metrics

struct EvalReport {
  std::vector<std::vector<int>> confusion;  // [gold][pred]
  std::vector<double> per_class_recall;     // -1 for absent classes
  double uar = 0.0;
  double war = 0.0;
  int skipped_classes = 0;  // gold-empty classes excluded from UAR
};

inline EvalReport compute_metrics(const std::vector<int>& preds, const std::vector<int>& golds,
                                  int num_classes) {
  if (preds.empty() || golds.empty()) throw EmptyInput("compute_metrics: no samples");
  require_shape(preds.size() == golds.size(), "compute_metrics: pred/gold length mismatch");
  EvalReport r;
  r.confusion.assign(num_classes, std::vector<int>(num_classes, 0));
  for (size_t i = 0; i < preds.size(); ++i) {
    if (golds[i] < 0 || golds[i] >= num_classes || preds[i] < 0 || preds[i] >= num_classes)
      throw LabelOutOfRange("compute_metrics: label outside [0, num_classes)");
    r.confusion[golds[i]][preds[i]] += 1;
  }
  int correct = 0;
  double recall_sum = 0.0;
  int present = 0;
  r.per_class_recall.assign(num_classes, -1.0);
  for (int c = 0; c < num_classes; ++c) {
    int row = 0;
    for (int j = 0; j < num_classes; ++j) row += r.confusion[c][j];
    correct += r.confusion[c][c];
    if (row == 0) {
      ++r.skipped_classes;
      continue;
    }
    r.per_class_recall[c] = static_cast<double>(r.confusion[c][c]) / row;
    recall_sum += r.per_class_recall[c];
    ++present;
  }
  r.war = static_cast<double>(correct) / preds.size();
  r.uar = present > 0 ? recall_sum / present : 0.0;
  return r;
}

// CSV exchange format: sample_id, gold, pred, then the score vector.
inline std::string predictions_csv(const std::vector<std::string>& ids,
                                   const std::vector<int>& golds, const std::vector<int>& preds,
                                   const std::vector<std::vector<double>>& scores) {
  std::string out = "sample_id,gold,pred";
  if (!scores.empty())
    for (size_t j = 0; j < scores[0].size(); ++j) out += ",score_" + std::to_string(j);
  out += "\n";
  for (size_t i = 0; i < ids.size(); ++i) {
    out += ids[i] + "," + std::to_string(golds[i]) + "," + std::to_string(preds[i]);
    for (double s : scores[i]) out += "," + std::to_string(s);
    out += "\n";
  }
  return out;
}

}  // namespace lgmae
