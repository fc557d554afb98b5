#pragma once

#include <functional>
#include <string>

#include "lgmae/config.hpp"
#include "lgmae/io.hpp"
#include "lgmae/synthetic.hpp"

namespace lgmae {

template <typename T>
struct ClipDataset {
  int size = 0;
  std::function<LabeledClip<T>(int)> get;
  std::function<std::string(int)> id;
};

template <typename T>
using EvalDataset = ClipDataset<T>;

namespace detail {

// Class-filtered view over the synthetic stream. Labels cycle through the
// classes, so the i-th filtered sample lives at block * num_classes +
// filter[i % filter.size()] and is relabeled to its filter position.
template <typename T>
ClipDataset<T> synthetic_dataset(const RunConfig& cfg, int count, int index_offset) {
  ClipDataset<T> ds;
  const SyntheticSpec spec = cfg.data.synthetic;
  const std::uint64_t seed = cfg.seed;
  if (cfg.class_filter.empty()) {
    ds.size = count;
    ds.get = [spec, seed, index_offset](int i) {
      return generate_synthetic_clip<T>(spec, seed, index_offset + i);
    };
    ds.id = [seed, index_offset](int i) {
      return "syn-" + std::to_string(seed) + "-" + std::to_string(index_offset + i);
    };
    return ds;
  }
  const std::vector<int> filter = cfg.class_filter;
  for (int c : filter)
    require_shape(c >= 0 && c < spec.num_classes, "class_filter entry outside [0, num_classes)");
  ds.size = count;
  ds.get = [spec, seed, filter, index_offset](int i) {
    const int f = static_cast<int>(filter.size());
    const int block = (index_offset + i) / f;
    const int within = (index_offset + i) % f;
    LabeledClip<T> clip =
        generate_synthetic_clip<T>(spec, seed, block * spec.num_classes + filter[within]);
    clip.label = within;
    return clip;
  };
  ds.id = [seed, filter, index_offset](int i) {
    const int f = static_cast<int>(filter.size());
    const int block = (index_offset + i) / f;
    const int within = (index_offset + i) % f;
    return "syn-" + std::to_string(seed) + "-" +
           std::to_string(block * static_cast<int>(filter.size()) + filter[within]);
  };
  return ds;
}

}  // namespace detail

template <typename T>
ClipDataset<T> make_dataset(const RunConfig& cfg) {
  if (!cfg.data.frames_dir.empty()) {
    ClipDataset<T> ds;
    ds.size = 1;
    const std::string dir = cfg.data.frames_dir;
    ds.get = [dir](int) { return LabeledClip<T>{load_frame_dir<T>(dir), 0}; };
    ds.id = [dir](int) { return dir; };
    return ds;
  }
  if (!cfg.data.raw_clip.empty()) {
    ClipDataset<T> ds;
    ds.size = 1;
    const std::string path = cfg.data.raw_clip;
    ds.get = [path](int) { return LabeledClip<T>{load_raw_clip<T>(path), 0}; };
    ds.id = [path](int) { return path; };
    return ds;
  }
  return detail::synthetic_dataset<T>(cfg, cfg.data.train_clips, 0);
}

// Evaluation samples continue the synthetic stream past the training
// indices, so train and eval sets are disjoint under one seed.
template <typename T>
EvalDataset<T> make_eval_dataset(const RunConfig& cfg) {
  return detail::synthetic_dataset<T>(cfg, cfg.data.eval_clips, cfg.data.train_clips);
}

}  // namespace lgmae
