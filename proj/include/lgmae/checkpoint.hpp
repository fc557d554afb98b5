#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lgmae/finetune.hpp"
#include "lgmae/io.hpp"
#include "lgmae/optim.hpp"
#include "lgmae/pretrain.hpp"

namespace lgmae {

struct VersionMismatch : std::runtime_error {
  explicit VersionMismatch(const std::string& w) : std::runtime_error(w) {}
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

// ---------------------------------------------------------------------------
// config <-> json

inline nlohmann::json encoder_config_json(const EncoderConfig& cfg) {
  return {
      {"depth", cfg.depth},
      {"channels", cfg.channels},
      {"heads", cfg.heads},
      {"region", {cfg.region.t, cfg.region.h, cfg.region.w}},
      {"grid", {cfg.grid.t, cfg.grid.h, cfg.grid.w}},
      {"stages", {{"intra", cfg.stages.intra}, {"inter", cfg.stages.inter}, {"lgi", cfg.stages.lgi}}},
      {"vit_global", cfg.vit_global},
      {"pool", cfg.pool == PoolMode::kRepresentativeMean ? "representative_mean" : "local_mean"},
      {"ffn_ratio", cfg.ffn_ratio},
  };
}

inline EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
  EncoderConfig cfg;
  cfg.depth = j.at("depth").get<int>();
  cfg.channels = j.at("channels").get<int>();
  cfg.heads = j.at("heads").get<int>();
  cfg.region = {j.at("region")[0].get<int>(), j.at("region")[1].get<int>(),
                j.at("region")[2].get<int>()};
  cfg.grid = {j.at("grid")[0].get<int>(), j.at("grid")[1].get<int>(), j.at("grid")[2].get<int>()};
  cfg.stages.intra = j.at("stages").at("intra").get<bool>();
  cfg.stages.inter = j.at("stages").at("inter").get<bool>();
  cfg.stages.lgi = j.at("stages").at("lgi").get<bool>();
  cfg.vit_global = j.at("vit_global").get<bool>();
  cfg.pool = j.at("pool").get<std::string>() == "local_mean" ? PoolMode::kLocalMean
                                                             : PoolMode::kRepresentativeMean;
  cfg.ffn_ratio = j.at("ffn_ratio").get<int>();
  return cfg;
}

inline nlohmann::json decoder_config_json(const DecoderConfig& cfg) {
  return {{"depth", cfg.depth},
          {"channels", cfg.channels},
          {"heads", cfg.heads},
          {"ffn_ratio", cfg.ffn_ratio}};
}

inline DecoderConfig decoder_config_from_json(const nlohmann::json& j) {
  DecoderConfig cfg;
  cfg.depth = j.at("depth").get<int>();
  cfg.channels = j.at("channels").get<int>();
  cfg.heads = j.at("heads").get<int>();
  cfg.ffn_ratio = j.at("ffn_ratio").get<int>();
  return cfg;
}

// ---------------------------------------------------------------------------
// versioned tensor container

namespace detail {

template <typename T>
void write_named_tensors(std::ostream& out, const std::vector<ParamRef<T>>& refs) {
  write_le<std::uint64_t>(out, refs.size());
  for (const auto& r : refs) {
    write_le<std::uint64_t>(out, r.name.size());
    out.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
    write_le<std::uint32_t>(out, std::is_same_v<T, float> ? kTensorDtypeF32 : kTensorDtypeF64);
    write_le<std::uint32_t>(out, static_cast<std::uint32_t>(r.dims.size()));
    for (int d : r.dims) write_le<std::uint64_t>(out, static_cast<std::uint64_t>(d));
    if constexpr (std::is_same_v<T, float>)
      write_f32_payload(out, r.data, r.size);
    else
      write_f64_payload(out, r.data, r.size);
  }
}

// Loads into the given registry; every expected name must appear with the
// expected dims, and no extra tensors are tolerated.
template <typename T>
void read_named_tensors(std::istream& in, const std::vector<ParamRef<T>>& refs,
                        const std::string& path) {
  const std::uint64_t count = read_le<std::uint64_t>(in);
  if (count != refs.size())
    throw ShapeError("checkpoint " + path + ": expected " + std::to_string(refs.size()) +
                     " tensors, found " + std::to_string(count));
  for (const auto& r : refs) {
    const std::uint64_t name_len = read_le<std::uint64_t>(in);
    std::string name(name_len, '\0');
    in.read(name.data(), static_cast<std::streamsize>(name_len));
    if (name != r.name)
      throw ShapeError("checkpoint " + path + ": expected tensor '" + r.name + "', found '" + name +
                       "'");
    const std::uint32_t dtype = read_le<std::uint32_t>(in);
    const std::uint32_t expected_dtype =
        std::is_same_v<T, float> ? kTensorDtypeF32 : kTensorDtypeF64;
    if (dtype != expected_dtype) throw ShapeError("checkpoint " + path + ": dtype mismatch at " + name);
    const std::uint32_t ndims = read_le<std::uint32_t>(in);
    if (ndims != r.dims.size()) throw ShapeError("checkpoint " + path + ": rank mismatch at " + name);
    std::uint64_t total = 1;
    for (std::uint32_t i = 0; i < ndims; ++i) {
      const std::uint64_t d = read_le<std::uint64_t>(in);
      if (d != static_cast<std::uint64_t>(r.dims[i]))
        throw ShapeError("checkpoint " + path + ": shape mismatch at " + name);
      total *= d;
    }
    if (total != r.size) throw ShapeError("checkpoint " + path + ": size mismatch at " + name);
    for (size_t i = 0; i < r.size; ++i) {
      if constexpr (std::is_same_v<T, float>) {
        const std::uint32_t bits = read_le<std::uint32_t>(in);
        std::memcpy(&r.data[i], &bits, 4);
      } else {
        const std::uint64_t bits = read_le<std::uint64_t>(in);
        std::memcpy(&r.data[i], &bits, 8);
      }
    }
    if (!in) throw ShapeError("checkpoint " + path + ": truncated at " + name);
  }
}

inline void write_header(std::ostream& out, const nlohmann::json& meta) {
  out.write("LGMAECKP", 8);
  write_le<std::uint32_t>(out, kCheckpointVersion);
  const std::string meta_str = meta.dump();
  write_le<std::uint64_t>(out, meta_str.size());
  out.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));
}

inline nlohmann::json read_header(std::istream& in, const std::string& path) {
  char magic[8];
  in.read(magic, 8);
  if (in.gcount() != 8 || std::string(magic, 8) != "LGMAECKP")
    throw IoError("checkpoint " + path + ": bad magic");
  const std::uint32_t version = read_le<std::uint32_t>(in);
  if (version != kCheckpointVersion)
    throw VersionMismatch("checkpoint " + path + ": version " + std::to_string(version) +
                          ", expected " + std::to_string(kCheckpointVersion));
  const std::uint64_t meta_len = read_le<std::uint64_t>(in);
  std::string meta_str(meta_len, '\0');
  in.read(meta_str.data(), static_cast<std::streamsize>(meta_len));
  if (!in) throw IoError("checkpoint " + path + ": truncated metadata");
  return nlohmann::json::parse(meta_str);
}

template <typename T>
std::vector<ParamRef<T>> optimizer_refs(AdamW<T>& opt) {
  std::vector<ParamRef<T>> refs;
  add_param(refs, "opt.m", opt.m);
  add_param(refs, "opt.v", opt.v);
  return refs;
}

}  // namespace detail

// Header metadata only (kind, configs, step), without loading tensors.
inline nlohmann::json peek_checkpoint_meta(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("peek_checkpoint_meta: cannot open " + path);
  return detail::read_header(f, path);
}

// ---------------------------------------------------------------------------
// pretrain checkpoints

template <typename T>
void save_pretrain_checkpoint(const std::string& path, PretrainModel<T>& model,
                              AdamW<T>* optimizer = nullptr, std::int64_t step = 0) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("save_pretrain_checkpoint: cannot open " + path);
  nlohmann::json meta = {
      {"kind", "pretrain"},
      {"encoder", encoder_config_json(model.encoder.cfg)},
      {"decoder", decoder_config_json(model.decoder.cfg)},
      {"step", step},
      {"optimizer", optimizer != nullptr},
  };
  if (optimizer != nullptr) meta["optimizer_steps"] = optimizer->steps;
  detail::write_header(f, meta);
  std::vector<ParamRef<T>> refs;
  model.visit_params(refs);
  if (optimizer != nullptr)
    for (auto& r : detail::optimizer_refs(*optimizer)) refs.push_back(r);
  detail::write_named_tensors(f, refs);
}

// Loads weights (and optimizer state when requested) into a model that must
// already match the stored configuration.
template <typename T>
std::int64_t load_pretrain_checkpoint(const std::string& path, PretrainModel<T>& model,
                                      AdamW<T>* optimizer = nullptr) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("load_pretrain_checkpoint: cannot open " + path);
  const nlohmann::json meta = detail::read_header(f, path);
  if (meta.at("kind") != "pretrain")
    throw ShapeError("checkpoint " + path + ": not a pretrain checkpoint");
  const EncoderConfig stored = encoder_config_from_json(meta.at("encoder"));
  const nlohmann::json here = encoder_config_json(model.encoder.cfg);
  if (encoder_config_json(stored) != here)
    throw ShapeError("checkpoint " + path + ": encoder config mismatch");
  const bool has_opt = meta.at("optimizer").get<bool>();
  if (optimizer != nullptr && !has_opt)
    throw ShapeError("checkpoint " + path + ": no optimizer state stored");

  std::vector<ParamRef<T>> refs;
  model.visit_params(refs);
  if (optimizer != nullptr) {
    std::vector<ParamRef<T>> model_only;
    model.visit_params(model_only);
    size_t total = 0;
    for (const auto& r : model_only) total += r.size;
    optimizer->m.assign(total, T(0));
    optimizer->v.assign(total, T(0));
    optimizer->steps = meta.at("optimizer_steps").get<std::int64_t>();
    for (auto& r : detail::optimizer_refs(*optimizer)) refs.push_back(r);
  } else if (has_opt) {
    // Skip stored optimizer tensors by reading into scratch buffers.
    std::vector<ParamRef<T>> model_only;
    model.visit_params(model_only);
    size_t total = 0;
    for (const auto& r : model_only) total += r.size;
    static thread_local std::vector<T> scratch_m, scratch_v;
    scratch_m.assign(total, T(0));
    scratch_v.assign(total, T(0));
    add_param(refs, "opt.m", scratch_m);
    add_param(refs, "opt.v", scratch_v);
  }
  detail::read_named_tensors(f, refs, path);
  return meta.at("step").get<std::int64_t>();
}

// ---------------------------------------------------------------------------
// finetune checkpoints

template <typename T>
void save_finetune_checkpoint(const std::string& path, FinetuneModel<T>& model,
                              AdamW<T>* optimizer = nullptr, std::int64_t step = 0) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("save_finetune_checkpoint: cannot open " + path);
  nlohmann::json meta = {
      {"kind", "finetune"},
      {"encoder", encoder_config_json(model.encoder.cfg)},
      {"num_classes", model.head.num_classes()},
      {"step", step},
      {"optimizer", optimizer != nullptr},
  };
  if (optimizer != nullptr) meta["optimizer_steps"] = optimizer->steps;
  detail::write_header(f, meta);
  std::vector<ParamRef<T>> refs;
  model.visit_params(refs);
  if (optimizer != nullptr)
    for (auto& r : detail::optimizer_refs(*optimizer)) refs.push_back(r);
  detail::write_named_tensors(f, refs);
}

template <typename T>
std::int64_t load_finetune_checkpoint(const std::string& path, FinetuneModel<T>& model,
                                      AdamW<T>* optimizer = nullptr) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("load_finetune_checkpoint: cannot open " + path);
  const nlohmann::json meta = detail::read_header(f, path);
  if (meta.at("kind") != "finetune")
    throw ShapeError("checkpoint " + path + ": not a finetune checkpoint");
  if (encoder_config_json(encoder_config_from_json(meta.at("encoder"))) !=
      encoder_config_json(model.encoder.cfg))
    throw ShapeError("checkpoint " + path + ": encoder config mismatch");
  if (meta.at("num_classes").get<int>() != model.head.num_classes())
    throw ShapeError("checkpoint " + path + ": class count mismatch");

  std::vector<ParamRef<T>> refs;
  model.visit_params(refs);
  const bool has_opt = meta.at("optimizer").get<bool>();
  if (optimizer != nullptr) {
    if (!has_opt) throw ShapeError("checkpoint " + path + ": no optimizer state stored");
    std::vector<ParamRef<T>> model_only;
    model.visit_params(model_only);
    size_t total = 0;
    for (const auto& r : model_only) total += r.size;
    optimizer->m.assign(total, T(0));
    optimizer->v.assign(total, T(0));
    optimizer->steps = meta.at("optimizer_steps").get<std::int64_t>();
    for (auto& r : detail::optimizer_refs(*optimizer)) refs.push_back(r);
  } else if (has_opt) {
    std::vector<ParamRef<T>> model_only;
    model.visit_params(model_only);
    size_t total = 0;
    for (const auto& r : model_only) total += r.size;
    static thread_local std::vector<T> scratch_m, scratch_v;
    scratch_m.assign(total, T(0));
    scratch_v.assign(total, T(0));
    add_param(refs, "opt.m", scratch_m);
    add_param(refs, "opt.v", scratch_v);
  }
  detail::read_named_tensors(f, refs, path);
  return meta.at("step").get<std::int64_t>();
}

// Fine-tuning start: pulls only the encoder out of a pre-train checkpoint.
// The decoder, mask token and prediction heads are dropped; the classifier
// head starts fresh.
template <typename T>
void load_encoder_from_pretrain(const std::string& path, FinetuneModel<T>& model) {
  PretrainModel<T> scratch;
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("load_encoder_from_pretrain: cannot open " + path);
  const nlohmann::json meta = detail::read_header(f, path);
  if (meta.at("kind") != "pretrain")
    throw ShapeError("checkpoint " + path + ": not a pretrain checkpoint");
  const EncoderConfig enc_cfg = encoder_config_from_json(meta.at("encoder"));
  // The pooling mode carries no weights; fine-tuning may choose it freely.
  nlohmann::json stored = encoder_config_json(enc_cfg);
  nlohmann::json wanted = encoder_config_json(model.encoder.cfg);
  stored.erase("pool");
  wanted.erase("pool");
  if (stored != wanted)
    throw ShapeError("checkpoint " + path + ": encoder config mismatch for fine-tuning");
  const DecoderConfig dec_cfg = decoder_config_from_json(meta.at("decoder"));
  scratch = PretrainModel<T>(enc_cfg, dec_cfg);

  std::vector<ParamRef<T>> refs;
  scratch.visit_params(refs);
  if (meta.at("optimizer").get<bool>()) {
    size_t total = 0;
    for (const auto& r : refs) total += r.size;
    static thread_local std::vector<T> scratch_m, scratch_v;
    scratch_m.assign(total, T(0));
    scratch_v.assign(total, T(0));
    add_param(refs, "opt.m", scratch_m);
    add_param(refs, "opt.v", scratch_v);
  }
  detail::read_named_tensors(f, refs, path);
  model.encoder = std::move(scratch.encoder);
}

}  // namespace lgmae
