#pragma once

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <memory>
#include <sstream>
#include <thread>
#include <vector>

#include "lgmae/checkpoint.hpp"
#include "lgmae/config.hpp"
#include "lgmae/costmeter.hpp"
#include "lgmae/finetune.hpp"
#include "lgmae/io.hpp"
#include "lgmae/optim.hpp"
#include "lgmae/train_data.hpp"

namespace lgmae {

// Thread count comes from the environment only; everything else is config.
inline int thread_count_from_env() {
  if (const char* s = std::getenv("LGMAE_THREADS")) {
    const int n = std::atoi(s);
    if (n >= 1) return std::min(n, 64);
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return static_cast<int>(std::min(hw == 0 ? 1u : hw, 8u));
}

namespace detail {

template <typename Fn>
void run_workers(int threads, Fn&& fn) {
  if (threads <= 1) {
    fn(0);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (int w = 0; w < threads; ++w) pool.emplace_back(fn, w);
  for (auto& t : pool) t.join();
}

// Per-worker gradient buffers combined in worker order: bit-identical runs
// at a fixed thread count, and within rounding across thread counts since
// sample work is independent of the worker that executes it.
template <typename Model>
void combine_worker_grads(std::vector<Model>& worker_grads, Model& total) {
  std::vector<ParamRef<float>> dst;
  total.visit_params(dst);
  for (auto& wg : worker_grads) {
    std::vector<ParamRef<float>> src;
    wg.visit_params(src);
    for (size_t p = 0; p < dst.size(); ++p)
      for (size_t i = 0; i < dst[p].size; ++i) dst[p].data[i] += src[p].data[i];
  }
}

inline std::string json_num(double v) {
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}

}  // namespace detail

struct PretrainRunResult {
  std::vector<double> epoch_loss;
  std::vector<double> epoch_loss_appearance;
  std::vector<double> epoch_loss_motion;
  std::string checkpoint_path;
};

inline PretrainRunResult run_pretrain(const RunConfig& cfg) {
  const int threads = thread_count_from_env();
  ClipDataset<float> data = make_dataset<float>(cfg);
  const RegionPartition partition = make_partition(cfg.encoder.grid, cfg.encoder.region);
  sample_tube_mask(partition, cfg.rho, cfg.seed);  // validates rho against the partition

  PretrainModel<float> model(cfg.encoder, cfg.decoder);
  model.init(cfg.seed);
  PretrainModel<float> grads(cfg.encoder, cfg.decoder);
  std::vector<PretrainModel<float>> worker_grads;
  for (int w = 0; w < threads; ++w) worker_grads.emplace_back(cfg.encoder, cfg.decoder);

  std::vector<ParamRef<float>> params, grad_refs;
  model.visit_params(params);
  grads.visit_params(grad_refs);

  AdamW<float> opt;
  opt.beta2 = cfg.beta2;
  opt.weight_decay = cfg.weight_decay;
  opt.init(params);

  const int n = data.size;
  const int steps_per_epoch = (n + cfg.batch - 1) / cfg.batch;
  LrSchedule schedule;
  schedule.base_lr = cfg.base_lr;
  schedule.batch_size = cfg.batch;
  schedule.warmup_steps = static_cast<std::int64_t>(cfg.warmup_epochs) * steps_per_epoch;
  schedule.total_steps = static_cast<std::int64_t>(cfg.epochs) * steps_per_epoch;
  schedule.min_lr = cfg.min_lr;

  std::filesystem::create_directories(cfg.out_dir);
  JsonlLogger log(cfg.out_dir + "/train_log.jsonl");

  PretrainRunResult result;
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;

  std::int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng = Rng::split(cfg.seed, 0x5u, epoch);
    shuffle_rng.shuffle(order);
    double epoch_total = 0.0, epoch_app = 0.0, epoch_mot = 0.0;

    for (int start = 0; start < n; start += cfg.batch, ++step) {
      const int bsize = std::min(cfg.batch, n - start);
      for (auto& wg : worker_grads) wg.zero();
      std::vector<PretrainLossReport> reports(bsize);

      detail::run_workers(threads, [&](int worker) {
        for (int p = worker; p < bsize; p += threads) {
          const int epoch_pos = start + p;
          const LabeledClip<float> sample = data.get(order[epoch_pos]);
          Rng crop_rng = Rng::split(cfg.seed, 0xC0u, epoch, epoch_pos);
          const int span = (cfg.data.clip_frames - 1) * cfg.data.clip_stride + 1;
          const int off = static_cast<int>(crop_rng.next_below(sample.video.frames - span + 1));
          const VideoClip<float> clip =
              sample_clip(sample.video, cfg.data.clip_frames, cfg.data.clip_stride, off);
          const TubeMask mask = sample_tube_mask(
              partition, cfg.rho,
              Rng::split(cfg.seed, 0xAAu, epoch, epoch_pos).next_u64());
          PretrainCache<float> cache;
          reports[p] = pretrain_forward(model, clip, partition, mask, cfg.lambda, cfg.target_norm,
                                        &cache);
          pretrain_backward(cache, model, worker_grads[worker], cfg.lambda);
        }
      });

      grads.zero();
      detail::combine_worker_grads(worker_grads, grads);
      const float inv_b = 1.0f / static_cast<float>(bsize);
      for (auto& r : grad_refs)
        for (size_t i = 0; i < r.size; ++i) r.data[i] *= inv_b;

      double total = 0.0, app = 0.0, mot = 0.0;
      for (const auto& r : reports) {
        total += r.total;
        app += r.appearance_mse;
        mot += r.motion_mse;
      }
      total /= bsize;
      app /= bsize;
      mot /= bsize;
      epoch_total += total * bsize;
      epoch_app += app * bsize;
      epoch_mot += mot * bsize;

      const double lr = schedule.at(step);
      opt.step(params, grad_refs, lr);
      log.log("{\"step\":" + std::to_string(step) + ",\"epoch\":" + std::to_string(epoch) +
              ",\"lr\":" + detail::json_num(lr) + ",\"loss\":" + detail::json_num(total) +
              ",\"loss_appearance\":" + detail::json_num(app) +
              ",\"loss_motion\":" + detail::json_num(mot) + "}");
    }
    result.epoch_loss.push_back(epoch_total / n);
    result.epoch_loss_appearance.push_back(epoch_app / n);
    result.epoch_loss_motion.push_back(epoch_mot / n);
    log.flush();
  }

  result.checkpoint_path = cfg.out_dir + "/pretrain_checkpoint.bin";
  save_pretrain_checkpoint(result.checkpoint_path, model, &opt, step);
  return result;
}

struct FinetuneRunResult {
  std::vector<double> epoch_loss;
  double train_accuracy = 0.0;
  std::string checkpoint_path;
};

namespace detail {

// Frozen-encoder path: the features cannot change, so they are extracted
// once (deterministic center-offset clips) and the head trains on the
// cached pool. Equivalent to stepping only the head, at a fraction of the
// cost.
inline FinetuneRunResult run_frozen_probe(const RunConfig& cfg, FinetuneModel<float>& model,
                                          ClipDataset<float>& data,
                                          const RegionPartition& partition, JsonlLogger& log) {
  const int threads = thread_count_from_env();
  const int n = data.size;
  const int span = (cfg.data.clip_frames - 1) * cfg.data.clip_stride + 1;
  Matrix<float> features(n, cfg.encoder.channels);
  std::vector<int> labels(n);
  run_workers(threads, [&](int worker) {
    for (int i = worker; i < n; i += threads) {
      const LabeledClip<float> sample = data.get(i);
      const VideoClip<float> clip = sample_clip(sample.video, cfg.data.clip_frames,
                                                cfg.data.clip_stride,
                                                (sample.video.frames - span) / 2);
      const Matrix<float> patches = cube_patches(clip);
      TokenGrid<float> grid;
      grid.grid = grid_for_clip(clip.frames, clip.height, clip.width);
      matmul(patches, model.encoder.embed.weight, grid.tokens);
      add_row_inplace(grid.tokens, model.encoder.embed.bias);
      EncodeResult<float> enc = encode(grid, partition, nullptr, model.encoder);
      const auto pooled = pool_for_classification(enc.locals, enc.reps, model.head.pool);
      std::copy(pooled.begin(), pooled.end(), features.row(i));
      labels[i] = sample.label;
    }
  });

  ClassifierHead<float> grads(cfg.encoder.channels, cfg.num_classes, model.head.pool);
  std::vector<ParamRef<float>> params, grad_refs;
  model.head.visit_params(params);
  grads.visit_params(grad_refs);
  AdamW<float> opt;
  opt.beta2 = cfg.beta2;
  opt.weight_decay = cfg.weight_decay;
  opt.init(params);

  const int steps_per_epoch = (n + cfg.batch - 1) / cfg.batch;
  LrSchedule schedule;
  schedule.base_lr = cfg.base_lr;
  schedule.batch_size = cfg.batch;
  schedule.warmup_steps = static_cast<std::int64_t>(cfg.warmup_epochs) * steps_per_epoch;
  schedule.total_steps = static_cast<std::int64_t>(cfg.epochs) * steps_per_epoch;
  schedule.min_lr = cfg.min_lr;

  FinetuneRunResult result;
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  std::int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng = Rng::split(cfg.seed, 0x6u, epoch);
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    for (int start = 0; start < n; start += cfg.batch, ++step) {
      const int bsize = std::min(cfg.batch, n - start);
      grads.zero();
      double loss = 0.0;
      for (int p = 0; p < bsize; ++p) {
        const int i = order[start + p];
        Matrix<float> row(1, features.cols);
        std::copy(features.row(i), features.row(i) + features.cols, row.row(0));
        LNCache<float> ln_cache;
        const Matrix<float> normed = layer_norm(row, model.head.fc_norm, &ln_cache);
        Matrix<float> logits;
        matmul(normed, model.head.weight, logits);
        add_row_inplace(logits, model.head.bias);
        std::vector<float> lv(logits.row(0), logits.row(0) + logits.cols);
        loss += cross_entropy(lv, labels[i]);
        std::vector<float> probs = softmax_vector(lv);
        probs[labels[i]] -= 1.0f;
        Matrix<float> dnormed(1, features.cols);
        for (int k2 = 0; k2 < static_cast<int>(probs.size()); ++k2) {
          grads.bias[k2] += probs[k2];
          for (int j = 0; j < features.cols; ++j) {
            grads.weight.at(j, k2) += normed.at(0, j) * probs[k2];
            dnormed.at(0, j) += model.head.weight.at(j, k2) * probs[k2];
          }
        }
        layer_norm_backward(dnormed, ln_cache, model.head.fc_norm, grads.fc_norm);
      }
      const float inv_b = 1.0f / static_cast<float>(bsize);
      for (auto& r : grad_refs)
        for (size_t i = 0; i < r.size; ++i) r.data[i] *= inv_b;
      loss /= bsize;
      epoch_loss += loss * bsize;
      const double lr = schedule.at(step);
      opt.step(params, grad_refs, lr);
      log.log("{\"step\":" + std::to_string(step) + ",\"epoch\":" + std::to_string(epoch) +
              ",\"lr\":" + json_num(lr) + ",\"loss\":" + json_num(loss) + "}");
    }
    result.epoch_loss.push_back(epoch_loss / n);
  }

  int correct = 0;
  for (int i = 0; i < n; ++i) {
    Matrix<float> row(1, features.cols);
    std::copy(features.row(i), features.row(i) + features.cols, row.row(0));
    const Matrix<float> normed = layer_norm(row, model.head.fc_norm);
    Matrix<float> logits;
    matmul(normed, model.head.weight, logits);
    add_row_inplace(logits, model.head.bias);
    int arg = 0;
    for (int j = 1; j < logits.cols; ++j)
      if (logits.at(0, j) > logits.at(0, arg)) arg = j;
    correct += arg == labels[i] ? 1 : 0;
  }
  result.train_accuracy = static_cast<double>(correct) / n;

  result.checkpoint_path = cfg.out_dir + "/finetune_checkpoint.bin";
  save_finetune_checkpoint(result.checkpoint_path, model, &opt, step);
  log.log("{\"train_accuracy\":" + json_num(result.train_accuracy) + "}");
  log.flush();
  return result;
}

}  // namespace detail

inline FinetuneRunResult run_finetune(const RunConfig& cfg) {
  const int threads = thread_count_from_env();
  ClipDataset<float> data = make_dataset<float>(cfg);
  const RegionPartition partition = cfg.encoder.vit_global
                                        ? RegionPartition{}
                                        : make_partition(cfg.encoder.grid, cfg.encoder.region);

  FinetuneModel<float> model(cfg.encoder, cfg.num_classes);
  model.init(cfg.seed);
  if (!cfg.init_checkpoint.empty()) load_encoder_from_pretrain(cfg.init_checkpoint, model);

  if (cfg.freeze_encoder) {
    std::filesystem::create_directories(cfg.out_dir);
    JsonlLogger log(cfg.out_dir + "/finetune_log.jsonl");
    return detail::run_frozen_probe(cfg, model, data, partition, log);
  }

  FinetuneModel<float> grads(cfg.encoder, cfg.num_classes);
  std::vector<FinetuneModel<float>> worker_grads;
  for (int w = 0; w < threads; ++w) worker_grads.emplace_back(cfg.encoder, cfg.num_classes);

  // Frozen-encoder runs step only the head: decay must not touch frozen
  // weights either.
  auto collect = [&](FinetuneModel<float>& m, std::vector<ParamRef<float>>& out) {
    out.clear();
    if (cfg.freeze_encoder)
      m.head.visit_params(out);
    else
      m.visit_params(out);
  };
  std::vector<ParamRef<float>> params, grad_refs;
  collect(model, params);
  collect(grads, grad_refs);

  AdamW<float> opt;
  opt.beta2 = cfg.beta2;
  opt.weight_decay = cfg.weight_decay;
  opt.init(params);

  const int n = data.size;
  const int steps_per_epoch = (n + cfg.batch - 1) / cfg.batch;
  LrSchedule schedule;
  schedule.base_lr = cfg.base_lr;
  schedule.batch_size = cfg.batch;
  schedule.warmup_steps = static_cast<std::int64_t>(cfg.warmup_epochs) * steps_per_epoch;
  schedule.total_steps = static_cast<std::int64_t>(cfg.epochs) * steps_per_epoch;
  schedule.min_lr = cfg.min_lr;

  std::filesystem::create_directories(cfg.out_dir);
  JsonlLogger log(cfg.out_dir + "/finetune_log.jsonl");

  FinetuneRunResult result;
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;

  const int span = (cfg.data.clip_frames - 1) * cfg.data.clip_stride + 1;
  std::int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng = Rng::split(cfg.seed, 0x6u, epoch);
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;

    for (int start = 0; start < n; start += cfg.batch, ++step) {
      const int bsize = std::min(cfg.batch, n - start);
      for (auto& wg : worker_grads) wg.zero();
      std::vector<double> losses(bsize, 0.0);

      detail::run_workers(threads, [&](int worker) {
        for (int p = worker; p < bsize; p += threads) {
          const int epoch_pos = start + p;
          const LabeledClip<float> sample = data.get(order[epoch_pos]);
          Rng crop_rng = Rng::split(cfg.seed, 0xC1u, epoch, epoch_pos);
          const int off = static_cast<int>(crop_rng.next_below(sample.video.frames - span + 1));
          const VideoClip<float> clip =
              sample_clip(sample.video, cfg.data.clip_frames, cfg.data.clip_stride, off);
          ClassifyCache<float> cache;
          classify_forward(model, clip, partition, &cache);
          losses[p] = cross_entropy(cache.logits, sample.label);
          classify_backward(cache, sample.label, model, worker_grads[worker], cfg.freeze_encoder);
        }
      });

      grads.zero();
      detail::combine_worker_grads(worker_grads, grads);
      const float inv_b = 1.0f / static_cast<float>(bsize);
      for (auto& r : grad_refs)
        for (size_t i = 0; i < r.size; ++i) r.data[i] *= inv_b;

      double loss = 0.0;
      for (double l : losses) loss += l;
      loss /= bsize;
      epoch_loss += loss * bsize;

      const double lr = schedule.at(step);
      opt.step(params, grad_refs, lr);
      log.log("{\"step\":" + std::to_string(step) + ",\"epoch\":" + std::to_string(epoch) +
              ",\"lr\":" + detail::json_num(lr) + ",\"loss\":" + detail::json_num(loss) + "}");
    }
    result.epoch_loss.push_back(epoch_loss / n);
    log.flush();
  }

  // Train accuracy with deterministic center-offset clips.
  std::atomic<int> correct{0};
  detail::run_workers(threads, [&](int worker) {
    for (int i = worker; i < n; i += threads) {
      const LabeledClip<float> sample = data.get(i);
      const VideoClip<float> clip = sample_clip(sample.video, cfg.data.clip_frames,
                                                cfg.data.clip_stride,
                                                (sample.video.frames - span) / 2);
      const auto logits = classify_forward(model, clip, partition);
      int arg = 0;
      for (size_t j = 1; j < logits.size(); ++j)
        if (logits[j] > logits[arg]) arg = static_cast<int>(j);
      if (arg == sample.label) correct.fetch_add(1);
    }
  });
  result.train_accuracy = static_cast<double>(correct.load()) / n;

  result.checkpoint_path = cfg.out_dir + "/finetune_checkpoint.bin";
  save_finetune_checkpoint(result.checkpoint_path, model, &opt, step);
  log.log("{\"train_accuracy\":" + detail::json_num(result.train_accuracy) + "}");
  log.flush();
  return result;
}

struct EvalRunResult {
  EvalReport report;
  std::string csv_path;
};

inline EvalRunResult run_eval(const RunConfig& cfg) {
  const nlohmann::json meta = peek_checkpoint_meta(cfg.checkpoint);
  if (meta.at("kind") != "finetune")
    throw ConfigError("eval: checkpoint " + cfg.checkpoint + " is not a finetune checkpoint");
  EncoderConfig enc = encoder_config_from_json(meta.at("encoder"));
  const int num_classes = meta.at("num_classes").get<int>();

  FinetuneModel<float> model(enc, num_classes);
  load_finetune_checkpoint(cfg.checkpoint, model);
  const RegionPartition partition =
      enc.vit_global ? RegionPartition{} : make_partition(enc.grid, enc.region);

  RunConfig data_cfg = cfg;
  EvalDataset<float> eval = make_eval_dataset<float>(data_cfg);
  if (eval.size == 0) throw EmptyInput("eval: no evaluation samples configured");

  const int threads = thread_count_from_env();
  std::vector<int> preds(eval.size), golds(eval.size);
  std::vector<std::vector<double>> scores(eval.size);
  detail::run_workers(threads, [&](int worker) {
    for (int i = worker; i < eval.size; i += threads) {
      const LabeledClip<float> sample = eval.get(i);
      const auto s = infer_video(model, sample.video, partition, cfg.data.clip_frames,
                                 cfg.data.clip_stride, cfg.infer_clips);
      golds[i] = sample.label;
      scores[i].assign(s.begin(), s.end());
      int arg = 0;
      for (size_t j = 1; j < s.size(); ++j)
        if (s[j] > s[arg]) arg = static_cast<int>(j);
      preds[i] = arg;
    }
  });

  EvalRunResult result;
  result.report = compute_metrics(preds, golds, num_classes);
  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    result.csv_path = cfg.out_dir + "/predictions.csv";
    std::vector<std::string> ids(eval.size);
    for (int i = 0; i < eval.size; ++i) ids[i] = eval.id(i);
    std::ofstream f(result.csv_path);
    f << predictions_csv(ids, golds, preds, scores);
  }
  return result;
}

struct ReconstructRunResult {
  std::string grid_image_path;
  PretrainLossReport loss;
};

// Writes the qualitative reconstruction sheet: original frames, the masked
// input (masked cubes grayed out), and the reconstruction where even-index
// frames are the appearance predictions and odd-index frames add the
// predicted frame difference. Visible slots keep ground truth.
inline ReconstructRunResult run_reconstruct(const RunConfig& cfg) {
  const nlohmann::json meta = peek_checkpoint_meta(cfg.checkpoint);
  if (meta.at("kind") != "pretrain")
    throw ConfigError("reconstruct: checkpoint " + cfg.checkpoint + " is not a pretrain checkpoint");
  EncoderConfig enc = encoder_config_from_json(meta.at("encoder"));
  const DecoderConfig dec = decoder_config_from_json(meta.at("decoder"));
  PretrainModel<float> model(enc, dec);
  load_pretrain_checkpoint(cfg.checkpoint, model);

  RunConfig data_cfg = cfg;
  ClipDataset<float> data = make_dataset<float>(data_cfg);
  const LabeledClip<float> sample = data.get(cfg.reconstruct_index % std::max(1, data.size));
  const int span = (cfg.data.clip_frames - 1) * cfg.data.clip_stride + 1;
  const VideoClip<float> clip = sample_clip(sample.video, cfg.data.clip_frames,
                                            cfg.data.clip_stride, (sample.video.frames - span) / 2);

  const GridShape grid = grid_for_clip(clip.frames, clip.height, clip.width);
  require_shape(grid == enc.grid, "reconstruct: clip geometry does not match checkpoint grid");
  const RegionPartition partition = make_partition(grid, enc.region);
  const TubeMask mask = sample_tube_mask(partition, cfg.rho, cfg.seed);

  PretrainCache<float> cache;
  ReconstructRunResult result;
  result.loss = pretrain_forward(model, clip, partition, mask, cfg.lambda < 0 ? 0.5 : cfg.lambda,
                                 cfg.target_norm, &cache);

  const ReconTargets<float> targets = normalize_targets(build_targets(clip), cfg.target_norm);
  const VideoClip<float> recon = stitch_reconstruction(
      cache.predictions.appearance, cache.predictions.motion, targets, mask, true);

  // Masked-input visualization: gray out masked cubes.
  VideoClip<float> masked = clip;
  for (int k = 0; k < grid.tokens(); ++k) {
    if (mask.visible[k]) continue;
    const int tc = k / (grid.h * grid.w);
    const int ph = (k / grid.w) % grid.h;
    const int pw = k % grid.w;
    for (int f = 0; f < kCubeFrames; ++f)
      for (int y = 0; y < kPatchSize; ++y)
        for (int x = 0; x < kPatchSize; ++x)
          for (int c = 0; c < kChannels; ++c)
            masked.at(tc * kCubeFrames + f, ph * kPatchSize + y, pw * kPatchSize + x, c) = 0.5f;
  }

  // 3-row sheet: original / masked / reconstructed, one column per frame.
  const int rows = 3, gap = 2;
  const int sheet_h = rows * clip.height + (rows - 1) * gap;
  const int sheet_w = clip.frames * clip.width + (clip.frames - 1) * gap;
  std::vector<float> sheet(static_cast<size_t>(sheet_h) * sheet_w * 3, 1.0f);
  const VideoClip<float>* sources[3] = {&clip, &masked, &recon};
  for (int r = 0; r < rows; ++r)
    for (int t = 0; t < clip.frames; ++t)
      for (int y = 0; y < clip.height; ++y)
        for (int x = 0; x < clip.width; ++x)
          for (int c = 0; c < 3; ++c) {
            const int sy = r * (clip.height + gap) + y;
            const int sx = t * (clip.width + gap) + x;
            sheet[(static_cast<size_t>(sy) * sheet_w + sx) * 3 + c] = sources[r]->at(t, y, x, c);
          }
  std::filesystem::create_directories(cfg.out_dir.empty() ? "." : cfg.out_dir);
  result.grid_image_path =
      (cfg.out_dir.empty() ? std::string(".") : cfg.out_dir) + "/reconstruction.ppm";
  write_ppm(result.grid_image_path, sheet_h, sheet_w, sheet.data());
  return result;
}

}  // namespace lgmae
