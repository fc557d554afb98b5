#pragma once

#include <fstream>
#include <optional>
#include <string>

#include <json.hpp>

#include "lgmae/checkpoint.hpp"
#include "lgmae/encoder.hpp"
#include "lgmae/pretrain.hpp"
#include "lgmae/synthetic.hpp"

namespace lgmae {

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& w) : std::runtime_error(w) {}
};

enum class RunMode { kPretrain, kFinetune, kEval, kFlops, kReconstruct };

struct DataConfig {
  SyntheticSpec synthetic;
  int train_clips = 0;
  int eval_clips = 0;
  int clip_frames = 16;
  int clip_stride = 1;
  std::string frames_dir;  // alternative clip source for reconstruct
  std::string raw_clip;    // raw tensor clip source
};

// One structured config file per run. Scientifically meaningful fields
// (rho, lambda, region, seed) have no defaults: a config that omits them
// where the mode needs them is rejected outright.
struct RunConfig {
  RunMode mode = RunMode::kPretrain;
  std::uint64_t seed = 0;
  EncoderConfig encoder;
  DecoderConfig decoder;
  double rho = -1.0;
  double lambda = -1.0;
  TargetNorm target_norm = TargetNorm::kPerCube;
  int epochs = 1;
  int batch = 32;
  double base_lr = 3e-4;
  int warmup_epochs = 1;
  double weight_decay = 0.05;
  double beta2 = 0.95;
  double min_lr = 0.0;
  DataConfig data;
  std::string out_dir;
  std::string init_checkpoint;  // finetune warm start
  std::string checkpoint;       // eval / reconstruct input
  int num_classes = 0;
  std::vector<int> class_filter;
  bool freeze_encoder = false;
  int reconstruct_index = 0;
  int infer_clips = 2;
};

namespace detail {

inline DecoderConfig default_decoder_for(int enc_channels) {
  DecoderConfig d;
  if (enc_channels >= 512) {
    d.channels = 384;
    d.heads = 6;
  } else if (enc_channels >= 384) {
    d.channels = 192;
    d.heads = 3;
  } else {
    d.channels = 128;
    d.heads = 2;
  }
  return d;
}

template <typename V>
V require_field(const nlohmann::json& j, const std::string& key, const std::string& ctx) {
  if (!j.contains(key)) throw ConfigError("config: missing required field '" + ctx + key + "'");
  try {
    return j.at(key).get<V>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config: field '" + ctx + key + "' has the wrong type");
  }
}

}  // namespace detail

inline EncoderConfig parse_model_config(const nlohmann::json& j, bool region_required) {
  EncoderConfig cfg;
  const std::string preset = detail::require_field<std::string>(j, "preset", "model.");
  if (preset == "tiny")
    cfg = EncoderConfig::tiny();
  else if (preset == "small")
    cfg = EncoderConfig::small();
  else if (preset == "base")
    cfg = EncoderConfig::base();
  else if (preset == "vit")
    cfg = EncoderConfig::vit_base();
  else if (preset == "custom")
    cfg = EncoderConfig{};
  else
    throw ConfigError("config: unknown model.preset '" + preset + "'");

  if (j.contains("depth")) cfg.depth = j.at("depth").get<int>();
  if (j.contains("channels")) cfg.channels = j.at("channels").get<int>();
  if (j.contains("heads")) cfg.heads = j.at("heads").get<int>();
  if (j.contains("vit_global")) cfg.vit_global = j.at("vit_global").get<bool>();
  if (j.contains("stages")) {
    cfg.stages.intra = j.at("stages").value("intra", true);
    cfg.stages.inter = j.at("stages").value("inter", true);
    cfg.stages.lgi = j.at("stages").value("lgi", true);
  }
  if (j.contains("pool")) {
    const std::string pool = j.at("pool").get<std::string>();
    if (pool == "representative_mean")
      cfg.pool = PoolMode::kRepresentativeMean;
    else if (pool == "local_mean")
      cfg.pool = PoolMode::kLocalMean;
    else
      throw ConfigError("config: model.pool must be representative_mean or local_mean");
  }
  if (cfg.vit_global && cfg.pool == PoolMode::kRepresentativeMean) cfg.pool = PoolMode::kLocalMean;

  if (j.contains("region")) {
    const auto r = j.at("region");
    if (!r.is_array() || r.size() != 3) throw ConfigError("config: model.region must be [t, h, w]");
    cfg.region = {r[0].get<int>(), r[1].get<int>(), r[2].get<int>()};
  } else if (region_required && !cfg.vit_global) {
    throw ConfigError("config: model.region is required (no default region size)");
  }
  if (cfg.channels <= 0 || cfg.depth < 0 || cfg.heads <= 0 || cfg.channels % cfg.heads != 0)
    throw ConfigError("config: invalid model dimensions");
  if (!cfg.vit_global && (!cfg.stages.intra && !cfg.stages.inter && !cfg.stages.lgi))
    throw ConfigError("config: at least one stage must be enabled (or vit_global)");
  return cfg;
}

inline DataConfig parse_data_config(const nlohmann::json& j) {
  DataConfig d;
  if (j.contains("synthetic")) {
    const auto& s = j.at("synthetic");
    d.synthetic.num_classes = detail::require_field<int>(s, "num_classes", "data.synthetic.");
    d.synthetic.video_frames = s.value("video_frames", 24);
    d.synthetic.height = s.value("height", 32);
    d.synthetic.width = s.value("width", 32);
    d.synthetic.noise = s.value("noise", 0.02);
    d.synthetic.speed = s.value("speed", 2);
    d.synthetic.validate();
    d.train_clips = s.value("train_clips", 0);
    d.eval_clips = s.value("eval_clips", 0);
  }
  if (j.contains("frames_dir")) d.frames_dir = j.at("frames_dir").get<std::string>();
  if (j.contains("raw_clip")) d.raw_clip = j.at("raw_clip").get<std::string>();
  d.clip_frames = j.value("clip_frames", 16);
  d.clip_stride = j.value("clip_stride", 1);
  if (d.clip_frames <= 0 || d.clip_frames % 2 != 0)
    throw ConfigError("config: data.clip_frames must be positive and even");
  if (d.clip_stride <= 0) throw ConfigError("config: data.clip_stride must be positive");
  return d;
}

inline RunConfig parse_run_config(const nlohmann::json& j) {
  RunConfig cfg;
  const std::string mode = detail::require_field<std::string>(j, "mode", "");
  if (mode == "pretrain")
    cfg.mode = RunMode::kPretrain;
  else if (mode == "finetune")
    cfg.mode = RunMode::kFinetune;
  else if (mode == "eval")
    cfg.mode = RunMode::kEval;
  else if (mode == "flops")
    cfg.mode = RunMode::kFlops;
  else if (mode == "reconstruct")
    cfg.mode = RunMode::kReconstruct;
  else
    throw ConfigError("config: unknown mode '" + mode + "'");

  cfg.seed = detail::require_field<std::uint64_t>(j, "seed", "");

  const bool needs_model = cfg.mode != RunMode::kEval && cfg.mode != RunMode::kReconstruct;
  if (j.contains("model"))
    cfg.encoder = parse_model_config(j.at("model"), /*region_required=*/true);
  else if (needs_model)
    throw ConfigError("config: missing required field 'model'");

  if (j.contains("data")) cfg.data = parse_data_config(j.at("data"));

  // Token grid follows the data clip geometry.
  cfg.encoder.grid = {cfg.data.clip_frames / kCubeFrames, cfg.data.synthetic.height / kPatchSize,
                      cfg.data.synthetic.width / kPatchSize};

  cfg.decoder = detail::default_decoder_for(cfg.encoder.channels);
  if (j.contains("decoder")) {
    const auto& d = j.at("decoder");
    cfg.decoder.depth = d.value("depth", cfg.decoder.depth);
    cfg.decoder.channels = d.value("channels", cfg.decoder.channels);
    cfg.decoder.heads = d.value("heads", cfg.decoder.heads);
    if (cfg.decoder.channels % cfg.decoder.heads != 0)
      throw ConfigError("config: decoder channels not divisible by heads");
  }

  if (cfg.mode == RunMode::kPretrain || cfg.mode == RunMode::kReconstruct) {
    cfg.rho = detail::require_field<double>(j, "rho", "");
    if (!(cfg.rho > 0.0 && cfg.rho < 1.0)) throw ConfigError("config: rho must be in (0, 1)");
  }
  if (cfg.mode == RunMode::kPretrain) {
    cfg.lambda = detail::require_field<double>(j, "lambda", "");
    if (cfg.lambda < 0.0 || cfg.lambda > 1.0) throw ConfigError("config: lambda must be in [0, 1]");
  }
  if (j.contains("target_norm")) {
    const std::string n = j.at("target_norm").get<std::string>();
    if (n == "raw")
      cfg.target_norm = TargetNorm::kRaw;
    else if (n == "per_cube")
      cfg.target_norm = TargetNorm::kPerCube;
    else
      throw ConfigError("config: target_norm must be raw or per_cube");
  }

  cfg.epochs = j.value("epochs", 1);
  cfg.batch = j.value("batch", 32);
  cfg.base_lr = j.value("base_lr", cfg.mode == RunMode::kFinetune ? 1e-3 : 3e-4);
  cfg.warmup_epochs = j.value("warmup_epochs", cfg.mode == RunMode::kPretrain ? 5 : 5);
  cfg.weight_decay = j.value("weight_decay", 0.05);
  cfg.beta2 = j.value("beta2", cfg.mode == RunMode::kFinetune ? 0.999 : 0.95);
  cfg.min_lr = j.value("min_lr", 0.0);
  if (cfg.epochs <= 0 || cfg.batch <= 0 || cfg.base_lr <= 0.0 || cfg.warmup_epochs < 0)
    throw ConfigError("config: epochs/batch/base_lr out of range");

  cfg.out_dir = j.value("out_dir", "");
  cfg.init_checkpoint = j.value("init_checkpoint", "");
  cfg.checkpoint = j.value("checkpoint", "");
  cfg.num_classes = j.value("num_classes", 0);
  if (j.contains("class_filter")) cfg.class_filter = j.at("class_filter").get<std::vector<int>>();
  cfg.freeze_encoder = j.value("freeze_encoder", false);
  cfg.reconstruct_index = j.value("reconstruct_index", 0);
  cfg.infer_clips = j.value("infer_clips", 2);

  if (cfg.mode == RunMode::kPretrain || cfg.mode == RunMode::kFinetune) {
    if (cfg.data.train_clips <= 0 && cfg.data.frames_dir.empty())
      throw ConfigError("config: training modes need data.synthetic.train_clips");
    if (cfg.out_dir.empty()) throw ConfigError("config: training modes need out_dir");
  }
  if (cfg.mode == RunMode::kFinetune || cfg.mode == RunMode::kEval) {
    if (cfg.num_classes == 0 && cfg.class_filter.empty() && cfg.data.synthetic.num_classes > 0)
      cfg.num_classes = cfg.data.synthetic.num_classes;
    if (!cfg.class_filter.empty()) cfg.num_classes = static_cast<int>(cfg.class_filter.size());
    if (cfg.num_classes < 2) throw ConfigError("config: need at least 2 classes");
  }
  if ((cfg.mode == RunMode::kEval || cfg.mode == RunMode::kReconstruct) && cfg.checkpoint.empty())
    throw ConfigError("config: eval/reconstruct need a checkpoint path");
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config: cannot open " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: " + path + " is not valid JSON: " + e.what());
  }
  return parse_run_config(j);
}

}  // namespace lgmae
