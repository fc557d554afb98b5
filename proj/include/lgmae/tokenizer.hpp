#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "lgmae/core.hpp"
#include "lgmae/rng.hpp"

namespace lgmae {

// Cube geometry is fixed project-wide: tokens cover 2 frames x 16x16 pixels.
inline constexpr int kCubeFrames = 2;
inline constexpr int kPatchSize = 16;
inline constexpr int kChannels = 3;
inline constexpr int kPatchValues = kPatchSize * kPatchSize * kChannels;  // 768
inline constexpr int kCubeValues = kCubeFrames * kPatchValues;            // 1536

struct OutOfRange : std::runtime_error {
  explicit OutOfRange(const std::string& w) : std::runtime_error(w) {}
};
struct TooSmall : std::runtime_error {
  explicit TooSmall(const std::string& w) : std::runtime_error(w) {}
};
struct OddFrameCount : std::runtime_error {
  explicit OddFrameCount(const std::string& w) : std::runtime_error(w) {}
};

// Frame parity convention: indices are 0-based everywhere. Appearance
// targets come from frames 0,2,4,...; motion targets are frames[2t+1] -
// frames[2t].
template <typename T>
struct VideoClip {
  int frames = 0;  // T
  int height = 0;  // H
  int width = 0;   // W
  std::vector<T> data;  // [T, H, W, 3] row-major
  int stride = 1;
  std::string source_id;

  VideoClip() = default;
  VideoClip(int t, int h, int w)
      : frames(t), height(h), width(w), data(static_cast<size_t>(t) * h * w * kChannels, T(0)) {}

  T& at(int t, int y, int x, int c) {
    return data[((static_cast<size_t>(t) * height + y) * width + x) * kChannels + c];
  }
  const T& at(int t, int y, int x, int c) const {
    return data[((static_cast<size_t>(t) * height + y) * width + x) * kChannels + c];
  }

  bool embeddable() const {
    return frames > 0 && frames % kCubeFrames == 0 && height % kPatchSize == 0 &&
           width % kPatchSize == 0;
  }
};

struct GridShape {
  int t = 0, h = 0, w = 0;
  int tokens() const { return t * h * w; }
  bool operator==(const GridShape&) const = default;
};

template <typename T>
struct TokenGrid {
  Matrix<T> tokens;  // [K, C]
  GridShape grid;
};

// Appearance / motion reconstruction targets, one frame pair per token slot
// along time. Raw until normalize_targets runs; per-patch stats are kept so
// stitching can invert the normalization.
template <typename T>
struct ReconTargets {
  int frames = 0;  // T/2
  int height = 0;
  int width = 0;
  std::vector<T> appearance;  // [T/2, H, W, 3]
  std::vector<T> motion;      // [T/2, H, W, 3]
  bool normalized = false;
  // Per (frame, patch) stats in token-grid row-major order, one entry per
  // 16x16 patch: filled only when normalized.
  std::vector<T> app_mean, app_std, mot_mean, mot_std;

  T& app_at(int t, int y, int x, int c) {
    return appearance[((static_cast<size_t>(t) * height + y) * width + x) * kChannels + c];
  }
  T& mot_at(int t, int y, int x, int c) {
    return motion[((static_cast<size_t>(t) * height + y) * width + x) * kChannels + c];
  }
  const T& app_at(int t, int y, int x, int c) const {
    return appearance[((static_cast<size_t>(t) * height + y) * width + x) * kChannels + c];
  }
  const T& mot_at(int t, int y, int x, int c) const {
    return motion[((static_cast<size_t>(t) * height + y) * width + x) * kChannels + c];
  }
};

// A raw video is any frame sequence; this selects num_frames of them at the
// given stride starting from offset.
template <typename T>
VideoClip<T> sample_clip(const VideoClip<T>& video, int num_frames, int stride, int offset = 0) {
  if (num_frames <= 0 || stride <= 0 || offset < 0)
    throw OutOfRange("sample_clip: non-positive sampling parameters");
  const int last = offset + (num_frames - 1) * stride;
  if (last >= video.frames)
    throw OutOfRange("sample_clip: video has " + std::to_string(video.frames) +
                     " frames, need index " + std::to_string(last));
  VideoClip<T> out(num_frames, video.height, video.width);
  out.stride = stride;
  out.source_id = video.source_id;
  const size_t frame_values = static_cast<size_t>(video.height) * video.width * kChannels;
  for (int i = 0; i < num_frames; ++i) {
    const size_t src = static_cast<size_t>(offset + i * stride) * frame_values;
    std::copy(video.data.begin() + src, video.data.begin() + src + frame_values,
              out.data.begin() + static_cast<size_t>(i) * frame_values);
  }
  return out;
}

// Crop each frame to out_h x out_w: horizontally centered, vertically
// aligned to the top of the frame.
template <typename T>
VideoClip<T> crop_upper_center(const VideoClip<T>& clip, int out_h = 160, int out_w = 160) {
  if (clip.height < out_h || clip.width < out_w)
    throw TooSmall("crop_upper_center: frame " + std::to_string(clip.height) + "x" +
                   std::to_string(clip.width) + " smaller than crop");
  const int x0 = (clip.width - out_w) / 2;
  VideoClip<T> out(clip.frames, out_h, out_w);
  out.stride = clip.stride;
  out.source_id = clip.source_id;
  for (int t = 0; t < clip.frames; ++t)
    for (int y = 0; y < out_h; ++y)
      for (int x = 0; x < out_w; ++x)
        for (int c = 0; c < kChannels; ++c) out.at(t, y, x, c) = clip.at(t, y, x0 + x, c);
  return out;
}

template <typename T>
struct EmbedParams {
  Matrix<T> weight;      // [1536, C]
  std::vector<T> bias;   // [C]

  explicit EmbedParams(int channels = 0)
      : weight(kCubeValues, channels), bias(static_cast<size_t>(channels), T(0)) {}

  void init(Rng& rng, double stddev = 0.02) {
    for (auto& v : weight.data) v = static_cast<T>(rng.next_trunc_normal(stddev));
    std::fill(bias.begin(), bias.end(), T(0));
  }
};

inline GridShape grid_for_clip(int frames, int height, int width) {
  return {frames / kCubeFrames, height / kPatchSize, width / kPatchSize};
}

// Flattens each non-overlapping 2x16x16x3 cube into a row of [K, 1536],
// row-major over (t', h', w'); within a cube, (frame, y, x, channel).
template <typename T>
Matrix<T> cube_patches(const VideoClip<T>& clip) {
  if (!clip.embeddable())
    throw ShapeError("cube_patches: clip dims not divisible by cube 2x16x16");
  const GridShape g = grid_for_clip(clip.frames, clip.height, clip.width);
  Matrix<T> patches(g.tokens(), kCubeValues);
  int k = 0;
  for (int tc = 0; tc < g.t; ++tc)
    for (int ph = 0; ph < g.h; ++ph)
      for (int pw = 0; pw < g.w; ++pw, ++k) {
        T* row = patches.row(k);
        int o = 0;
        for (int f = 0; f < kCubeFrames; ++f)
          for (int y = 0; y < kPatchSize; ++y)
            for (int x = 0; x < kPatchSize; ++x)
              for (int c = 0; c < kChannels; ++c)
                row[o++] = clip.at(tc * kCubeFrames + f, ph * kPatchSize + y, pw * kPatchSize + x, c);
      }
  return patches;
}

template <typename T>
TokenGrid<T> cube_embed(const VideoClip<T>& clip, const EmbedParams<T>& p) {
  const Matrix<T> patches = cube_patches(clip);
  require_shape(p.weight.rows == kCubeValues, "cube_embed: weight rows != 1536");
  TokenGrid<T> out;
  out.grid = grid_for_clip(clip.frames, clip.height, clip.width);
  matmul(patches, p.weight, out.tokens);
  add_row_inplace(out.tokens, p.bias);
  return out;
}

template <typename T>
ReconTargets<T> build_targets(const VideoClip<T>& clip) {
  if (clip.frames % 2 != 0) throw OddFrameCount("build_targets: frame count must be even");
  ReconTargets<T> t;
  t.frames = clip.frames / 2;
  t.height = clip.height;
  t.width = clip.width;
  const size_t frame_values = static_cast<size_t>(clip.height) * clip.width * kChannels;
  t.appearance.resize(t.frames * frame_values);
  t.motion.resize(t.frames * frame_values);
  for (int i = 0; i < t.frames; ++i) {
    const T* even = clip.data.data() + static_cast<size_t>(2 * i) * frame_values;
    const T* odd = clip.data.data() + static_cast<size_t>(2 * i + 1) * frame_values;
    T* app = t.appearance.data() + static_cast<size_t>(i) * frame_values;
    T* mot = t.motion.data() + static_cast<size_t>(i) * frame_values;
    for (size_t j = 0; j < frame_values; ++j) {
      app[j] = even[j];
      mot[j] = odd[j] - even[j];
    }
  }
  return t;
}

enum class TargetNorm { kRaw, kPerCube };

inline constexpr double kNormEps = 1e-6;

namespace detail {

template <typename T>
void normalize_frames(std::vector<T>& frames, int num_frames, int height, int width,
                      std::vector<T>& means, std::vector<T>& stds) {
  const int gh = height / kPatchSize, gw = width / kPatchSize;
  means.assign(static_cast<size_t>(num_frames) * gh * gw, T(0));
  stds.assign(static_cast<size_t>(num_frames) * gh * gw, T(0));
  size_t s = 0;
  for (int t = 0; t < num_frames; ++t)
    for (int ph = 0; ph < gh; ++ph)
      for (int pw = 0; pw < gw; ++pw, ++s) {
        double sum = 0.0, sumsq = 0.0;
        for (int y = 0; y < kPatchSize; ++y)
          for (int x = 0; x < kPatchSize; ++x)
            for (int c = 0; c < kChannels; ++c) {
              const double v = frames[((static_cast<size_t>(t) * height + ph * kPatchSize + y) * width +
                                       pw * kPatchSize + x) * kChannels + c];
              sum += v;
              sumsq += v * v;
            }
        const double mean = sum / kPatchValues;
        const double var = std::max(0.0, sumsq / kPatchValues - mean * mean);
        const double sd = std::sqrt(var);
        means[s] = static_cast<T>(mean);
        stds[s] = static_cast<T>(sd);
        const double inv = 1.0 / (sd + kNormEps);
        for (int y = 0; y < kPatchSize; ++y)
          for (int x = 0; x < kPatchSize; ++x)
            for (int c = 0; c < kChannels; ++c) {
              T& v = frames[((static_cast<size_t>(t) * height + ph * kPatchSize + y) * width +
                             pw * kPatchSize + x) * kChannels + c];
              v = static_cast<T>((v - mean) * inv);
            }
      }
}

template <typename T>
void denormalize_frames(std::vector<T>& frames, int num_frames, int height, int width,
                        const std::vector<T>& means, const std::vector<T>& stds) {
  const int gh = height / kPatchSize, gw = width / kPatchSize;
  size_t s = 0;
  for (int t = 0; t < num_frames; ++t)
    for (int ph = 0; ph < gh; ++ph)
      for (int pw = 0; pw < gw; ++pw, ++s) {
        const double mean = means[s];
        const double scale = stds[s] + kNormEps;
        for (int y = 0; y < kPatchSize; ++y)
          for (int x = 0; x < kPatchSize; ++x)
            for (int c = 0; c < kChannels; ++c) {
              T& v = frames[((static_cast<size_t>(t) * height + ph * kPatchSize + y) * width +
                             pw * kPatchSize + x) * kChannels + c];
              v = static_cast<T>(v * scale + mean);
            }
      }
}

}  // namespace detail

// Per-cube mode standardizes every 16x16x3 patch of each target frame and
// records the stats; raw mode is the identity.
template <typename T>
ReconTargets<T> normalize_targets(ReconTargets<T> targets, TargetNorm mode) {
  if (mode == TargetNorm::kRaw || targets.normalized) return targets;
  detail::normalize_frames(targets.appearance, targets.frames, targets.height, targets.width,
                           targets.app_mean, targets.app_std);
  detail::normalize_frames(targets.motion, targets.frames, targets.height, targets.width,
                           targets.mot_mean, targets.mot_std);
  targets.normalized = true;
  return targets;
}

template <typename T>
ReconTargets<T> denormalize_targets(ReconTargets<T> targets) {
  if (!targets.normalized) return targets;
  detail::denormalize_frames(targets.appearance, targets.frames, targets.height, targets.width,
                             targets.app_mean, targets.app_std);
  detail::denormalize_frames(targets.motion, targets.frames, targets.height, targets.width,
                             targets.mot_mean, targets.mot_std);
  targets.normalized = false;
  targets.app_mean.clear();
  targets.app_std.clear();
  targets.mot_mean.clear();
  targets.mot_std.clear();
  return targets;
}

// Target frames rearranged to one row per token: [K, 768], aligned with the
// token grid's row-major (t', h', w') order.
template <typename T>
void patchify_targets(const ReconTargets<T>& t, Matrix<T>& appearance, Matrix<T>& motion) {
  const int gh = t.height / kPatchSize, gw = t.width / kPatchSize;
  const int k_total = t.frames * gh * gw;
  appearance = Matrix<T>(k_total, kPatchValues);
  motion = Matrix<T>(k_total, kPatchValues);
  int k = 0;
  for (int tc = 0; tc < t.frames; ++tc)
    for (int ph = 0; ph < gh; ++ph)
      for (int pw = 0; pw < gw; ++pw, ++k) {
        T* ar = appearance.row(k);
        T* mr = motion.row(k);
        int o = 0;
        for (int y = 0; y < kPatchSize; ++y)
          for (int x = 0; x < kPatchSize; ++x)
            for (int c = 0; c < kChannels; ++c, ++o) {
              ar[o] = t.app_at(tc, ph * kPatchSize + y, pw * kPatchSize + x, c);
              mr[o] = t.mot_at(tc, ph * kPatchSize + y, pw * kPatchSize + x, c);
            }
      }
}

namespace detail {

template <typename T>
void fill_axis_sincos(T* row, int offset, int dim, int pos) {
  for (int i = 0; i < dim / 2; ++i) {
    const double omega = 1.0 / std::pow(10000.0, static_cast<double>(i) / (dim / 2));
    row[offset + 2 * i] = static_cast<T>(std::sin(pos * omega));
    row[offset + 2 * i + 1] = static_cast<T>(std::cos(pos * omega));
  }
}

}  // namespace detail

// Fixed 3D sin-cos table, channels split across the (t', h', w') axes.
// Deterministic in (grid, C); every entry is in [-1, 1].
template <typename T>
Matrix<T> sincos_position_table(GridShape grid, int channels) {
  require_shape(channels % 2 == 0, "sincos_position_table: channels must be even");
  const int ct = (channels / 3) & ~1;
  const int ch = ct;
  const int cw = channels - ct - ch;
  Matrix<T> table(grid.tokens(), channels);
  int k = 0;
  for (int t = 0; t < grid.t; ++t)
    for (int h = 0; h < grid.h; ++h)
      for (int w = 0; w < grid.w; ++w, ++k) {
        T* row = table.row(k);
        detail::fill_axis_sincos(row, 0, ct, t);
        detail::fill_axis_sincos(row, ct, ch, h);
        detail::fill_axis_sincos(row, ct + ch, cw, w);
      }
  return table;
}

template <typename T>
TokenGrid<T> add_positional(TokenGrid<T> grid) {
  const Matrix<T> table = sincos_position_table<T>(grid.grid, grid.tokens.cols);
  add_inplace(grid.tokens, table);
  return grid;
}

}  // namespace lgmae
