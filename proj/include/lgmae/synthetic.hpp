#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "lgmae/rng.hpp"
#include "lgmae/tokenizer.hpp"

namespace lgmae {

// Labeled clips of a textured field with one localized bright blob. Classes
// come in pairs sharing one texture family: class 2f is the static member,
// class 2f+1 translates the whole field diagonally. Every frame of a moving
// clip is an exact toroidal shift of the scene, so per-frame statistics
// (and histograms) match the static member of the pair -- the (0, 1) pair
// is separable by motion alone.
struct SyntheticSpec {
  int num_classes = 4;   // even; classes 2f / 2f+1 share texture family f
  int video_frames = 24;
  int height = 32;
  int width = 32;
  double noise = 0.02;
  int speed = 2;  // pixels per frame along (1, 1) for moving classes

  void validate() const {
    require_shape(num_classes >= 2 && num_classes % 2 == 0,
                  "SyntheticSpec: num_classes must be even and >= 2");
    require_shape(height % kPatchSize == 0 && width % kPatchSize == 0,
                  "SyntheticSpec: frame size must be a multiple of 16");
    require_shape(video_frames % 2 == 0, "SyntheticSpec: video_frames must be even");
    require_shape(noise >= 0.0, "SyntheticSpec: negative noise");
    require_shape(speed > 0, "SyntheticSpec: speed must be positive");
  }
};

namespace detail {

struct Sinusoid {
  int kx = 0, ky = 0;
  double phase = 0.0;
  double amp = 0.0;
};

// Each texture family is a fixed pair of integer-frequency plane waves;
// only the phases are random per sample. Integer frequencies wrap the frame
// exactly and |kx + ky| >= 2 keeps the temporal phase velocity of moving
// textures away from zero. Fixed frequencies and amplitudes pin the
// per-frame mean and variance of every class to the same values, so classes
// inside one family differ by motion alone.
inline std::vector<Sinusoid> draw_texture(Rng& rng, int family) {
  static constexpr int kFamilyWaves[4][2][2] = {
      {{2, 1}, {1, 2}},
      {{3, -1}, {-1, 3}},
      {{2, 2}, {3, 1}},
      {{1, 3}, {-2, 4}},
  };
  static constexpr double kAmps[2] = {0.10, 0.07};
  const auto& freqs = kFamilyWaves[family % 4];
  std::vector<Sinusoid> waves(2);
  for (int j = 0; j < 2; ++j)
    waves[j] = {freqs[j][0], freqs[j][1], rng.next_double() * 6.283185307179586, kAmps[j]};
  return waves;
}

inline double toroidal_gauss(double dx, double dy, double cx, double cy, double width,
                             double height, double sigma) {
  double ox = std::abs(dx - cx);
  ox = std::min(ox, width - ox);
  double oy = std::abs(dy - cy);
  oy = std::min(oy, height - oy);
  return std::exp(-(ox * ox + oy * oy) / (2.0 * sigma * sigma));
}

}  // namespace detail

template <typename T>
struct LabeledClip {
  VideoClip<T> video;
  int label = 0;
};

// Deterministic in (spec, seed, index); labels cycle through the classes so
// any prefix of the dataset is balanced.
template <typename T>
LabeledClip<T> generate_synthetic_clip(const SyntheticSpec& spec, std::uint64_t seed, int index) {
  spec.validate();
  const int label = index % spec.num_classes;
  const int family = label / 2;
  const bool moving = (label % 2) == 1;

  Rng rng = Rng::split(seed, static_cast<std::uint64_t>(index), 0x51);
  const auto waves = detail::draw_texture(rng, family);
  const double blob_cx = rng.next_double() * spec.width;
  const double blob_cy = rng.next_double() * spec.height;
  const double blob_sigma = spec.width / 6.4;
  static constexpr double kBlobAmp[kChannels] = {0.25, 0.20, 0.15};
  const double vx = moving ? spec.speed : 0;
  const double vy = moving ? spec.speed : 0;

  LabeledClip<T> out;
  out.label = label;
  out.video = VideoClip<T>(spec.video_frames, spec.height, spec.width);
  out.video.source_id = "synthetic:" + std::to_string(seed) + ":" + std::to_string(index);
  const double tau = 6.283185307179586;
  for (int t = 0; t < spec.video_frames; ++t)
    for (int y = 0; y < spec.height; ++y)
      for (int x = 0; x < spec.width; ++x) {
        // The whole field is evaluated at shifted coordinates, so a moving
        // frame is an exact toroidal translate of the scene.
        const double dx = x - vx * t;
        const double dy = y - vy * t;
        const double blob =
            detail::toroidal_gauss(dx, dy, blob_cx, blob_cy, spec.width, spec.height, blob_sigma);
        for (int c = 0; c < kChannels; ++c) {
          double v = 0.5 + kBlobAmp[c] * blob;
          for (const auto& w : waves) {
            const double arg =
                tau * (w.kx * dx / spec.width + w.ky * dy / spec.height) + w.phase + 0.7 * c;
            v += w.amp * std::sin(arg);
          }
          if (spec.noise > 0.0) v += spec.noise * rng.next_normal();
          out.video.at(t, y, x, c) = static_cast<T>(std::min(1.0, std::max(0.0, v)));
        }
      }
  return out;
}

template <typename T>
std::vector<LabeledClip<T>> generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed, int n) {
  std::vector<LabeledClip<T>> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) out.push_back(generate_synthetic_clip<T>(spec, seed, i));
  return out;
}

// Generator self-check statistics for the designated motion-only pair
// (classes 0 and 1): per-frame mean/variance must match while the
// frame-difference energy separates by an order of magnitude.
struct MotionPairStats {
  double mean_gap = 0.0;       // |mean(frames of class 0) - mean(class 1)|
  double var_gap = 0.0;        // |var - var|
  double diff_energy_static = 0.0;
  double diff_energy_moving = 0.0;
};

template <typename T>
MotionPairStats motion_pair_stats(const SyntheticSpec& spec, std::uint64_t seed, int per_class) {
  double mean[2] = {0, 0}, var[2] = {0, 0}, diff[2] = {0, 0};
  for (int cls = 0; cls < 2; ++cls) {
    for (int i = 0; i < per_class; ++i) {
      // Dataset indices cycle labels, so class c appears at c, c+C, ...
      const auto clip = generate_synthetic_clip<T>(spec, seed, cls + i * spec.num_classes);
      double s = 0.0, s2 = 0.0;
      for (T v : clip.video.data) {
        s += v;
        s2 += static_cast<double>(v) * v;
      }
      const double n = static_cast<double>(clip.video.data.size());
      mean[cls] += s / n;
      var[cls] += s2 / n - (s / n) * (s / n);
      const auto targets = build_targets(clip.video);
      double e = 0.0;
      for (T v : targets.motion) e += static_cast<double>(v) * v;
      diff[cls] += e / targets.motion.size();
    }
    mean[cls] /= per_class;
    var[cls] /= per_class;
    diff[cls] /= per_class;
  }
  MotionPairStats st;
  st.mean_gap = std::abs(mean[0] - mean[1]);
  st.var_gap = std::abs(var[0] - var[1]);
  st.diff_energy_static = diff[0];
  st.diff_energy_moving = diff[1];
  return st;
}

}  // namespace lgmae
