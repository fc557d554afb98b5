#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "lgmae/costmeter.hpp"
#include "lgmae/train.hpp"

namespace lgmae::selfcheck {

struct CheckResult {
  int id = 0;
  std::string name;
  bool pass = false;
  std::string detail;
  double seconds = 0.0;
};

namespace detail {

inline bool within(double got, double want, double tol, std::string& msg) {
  const double rel = std::abs(got - want) / std::abs(want);
  if (rel >= tol) {
    msg += " [got " + std::to_string(got) + " vs " + std::to_string(want) + ", rel " +
           std::to_string(rel) + "]";
    return false;
  }
  return true;
}

inline void fill_uniform(std::vector<ParamRef<double>>& refs, Rng& rng, double scale) {
  for (auto& p : refs)
    for (size_t i = 0; i < p.size; ++i) p.data[i] = (rng.next_double() * 2.0 - 1.0) * scale;
}

// Central finite differences over every stride-th element.
inline double max_rel_fd(const std::vector<ParamRef<double>>& params,
                         const std::vector<ParamRef<double>>& grads,
                         const std::function<double()>& loss, int stride) {
  double worst = 0.0;
  const double h = 1e-5;
  for (size_t p = 0; p < params.size(); ++p)
    for (size_t i = 0; i < params[p].size; i += stride) {
      double& w = params[p].data[i];
      const double saved = w;
      w = saved + h;
      const double lp = loss();
      w = saved - h;
      const double lm = loss();
      w = saved;
      const double numeric = (lp - lm) / (2.0 * h);
      const double analytic = grads[p].data[i];
      const double abs_err = std::abs(analytic - numeric);
      if (abs_err <= 1e-9) continue;
      worst = std::max(worst, abs_err / std::max({std::abs(analytic), std::abs(numeric), 1e-8}));
    }
  return worst;
}

}  // namespace detail

// --------------------------------------------------------------------------
// 1. parameter reconciliation

inline CheckResult check_params() {
  CheckResult r{1, "parameter-reconciliation"};
  std::string msg;
  bool ok = true;
  auto variant = [](bool intra, bool inter, bool lgi) {
    EncoderConfig cfg = EncoderConfig::base();
    cfg.stages = {intra, inter, lgi};
    return cfg;
  };
  ok &= detail::within(count_params(variant(true, false, false)).params, 51.2e6, 0.02, msg);
  ok &= detail::within(count_params(variant(true, true, false)).params, 68.0e6, 0.02, msg);
  ok &= detail::within(count_params(variant(true, false, true)).params, 68.1e6, 0.02, msg);
  ok &= detail::within(count_params(EncoderConfig::base()).params, 84.9e6, 0.02, msg);
  ok &= detail::within(count_params(EncoderConfig::vit_base()).params, 86.2e6, 0.02, msg);
  ok &= detail::within(count_params(EncoderConfig::tiny()).params, 21.5e6, 0.02, msg);
  ok &= detail::within(count_params(EncoderConfig::small()).params, 47.9e6, 0.02, msg);
  r.pass = ok;
  r.detail = ok ? "8 table entries within 2%" : msg;
  return r;
}

// --------------------------------------------------------------------------
// 2. flops reconciliation

inline CheckResult check_flops() {
  CheckResult r{2, "flops-reconciliation"};
  std::string msg;
  bool ok = true;
  const GridShape grid{8, 10, 10};
  auto variant = [](bool intra, bool inter, bool lgi) {
    EncoderConfig cfg = EncoderConfig::base();
    cfg.stages = {intra, inter, lgi};
    return cfg;
  };
  ok &= detail::within(count_flops(variant(true, false, false), grid).flops, 42.7e9, 0.10, msg);
  ok &= detail::within(count_flops(variant(true, true, false), grid).flops, 42.8e9, 0.10, msg);
  ok &= detail::within(count_flops(variant(true, false, true), grid).flops, 49.6e9, 0.10, msg);
  ok &= detail::within(count_flops(EncoderConfig::base(), grid).flops, 49.8e9, 0.10, msg);
  ok &= detail::within(count_flops(EncoderConfig::vit_base(), grid).flops, 80.8e9, 0.10, msg);

  const struct {
    RegionShape region;
    double want;
  } rows[] = {{{1, 5, 10}, 49.8e9},
              {{2, 2, 10}, 50.0e9},
              {{2, 5, 10}, 49.8e9},
              {{2, 10, 10}, 50.7e9},
              {{4, 5, 10}, 50.7e9}};
  for (const auto& row : rows) {
    EncoderConfig cfg = EncoderConfig::base();
    cfg.region = row.region;
    ok &= detail::within(count_flops(cfg, grid).flops, row.want, 0.10, msg);
  }
  ok &= detail::within(attention_complexity_ratio(8, 100), 0.1351, 0.01, msg);
  r.pass = ok;
  r.detail = ok ? "10 table entries within 10%, attention ratio 0.1351 within 1%" : msg;
  return r;
}

// --------------------------------------------------------------------------
// 3. gradient correctness

inline CheckResult check_gradients() {
  CheckResult r{3, "gradient-correctness"};
  std::ostringstream detail_msg;
  bool ok = true;
  const int c = 12, heads = 3, rows = 7;
  Rng rng(2024);

  // layer norm
  {
    Matrix<double> x(rows, c);
    LNParams<double> p(c);
    std::vector<ParamRef<double>> xs;
    add_param(xs, "x", x);
    detail::fill_uniform(xs, rng, 1.0);
    for (auto& g : p.gamma) g = rng.next_double() + 0.5;
    for (auto& b : p.beta) b = rng.next_double() - 0.5;
    auto loss = [&]() {
      const auto y = layer_norm(x, p);
      double s = 0.0;
      for (double v : y.data) s += v * v;
      return 0.5 * s;
    };
    LNCache<double> cache;
    const auto y = layer_norm(x, p, &cache);
    LNParams<double> grad(c);
    grad.zero();
    Matrix<double> dx = layer_norm_backward(y, cache, p, grad);
    std::vector<ParamRef<double>> params, grads;
    add_param(params, "x", x);
    add_param(grads, "x", dx);
    add_param(params, "gamma", p.gamma);
    add_param(grads, "gamma", grad.gamma);
    add_param(params, "beta", p.beta);
    add_param(grads, "beta", grad.beta);
    const double worst = detail::max_rel_fd(params, grads, loss, 1);
    ok &= worst < 1e-5;
    detail_msg << "ln " << worst << " ";
  }

  // mhsa / mhca / ffn
  {
    AttentionParams<double> p(c, heads);
    Matrix<double> xq(rows, c), xkv(5, c);
    std::vector<ParamRef<double>> seed_refs;
    add_param(seed_refs, "xq", xq);
    add_param(seed_refs, "xkv", xkv);
    p.init(rng, 0.4);
    detail::fill_uniform(seed_refs, rng, 1.0);
    for (auto* b : {&p.b_q, &p.b_k, &p.b_v, &p.b_o})
      for (auto& v : *b) v = rng.next_double() * 0.2 - 0.1;

    auto run_case = [&](bool self, const char* tag) {
      auto loss = [&]() {
        const auto y = self ? mhsa(xq, p) : mhca(xq, xkv, p);
        double s = 0.0;
        for (double v : y.data) s += v * v;
        return 0.5 * s;
      };
      AttentionCache<double> cache;
      const auto y = self ? mhsa(xq, p, &cache) : mhca(xq, xkv, p, &cache);
      AttentionParams<double> grad(c, heads);
      grad.zero();
      Matrix<double> dxq, dxkv;
      if (self) {
        dxq = mhsa_backward(y, cache, p, grad);
      } else {
        auto g = mhca_backward(y, cache, p, grad);
        dxq = std::move(g.dxq);
        dxkv = std::move(g.dxkv);
      }
      std::vector<ParamRef<double>> params, grads;
      add_param(params, "xq", xq);
      add_param(grads, "xq", dxq);
      if (!self) {
        add_param(params, "xkv", xkv);
        add_param(grads, "xkv", dxkv);
      }
      add_param(params, "w_q", p.w_q);
      add_param(grads, "w_q", grad.w_q);
      add_param(params, "w_k", p.w_k);
      add_param(grads, "w_k", grad.w_k);
      add_param(params, "w_v", p.w_v);
      add_param(grads, "w_v", grad.w_v);
      add_param(params, "w_o", p.w_o);
      add_param(grads, "w_o", grad.w_o);
      add_param(params, "b_q", p.b_q);
      add_param(grads, "b_q", grad.b_q);
      add_param(params, "b_k", p.b_k);
      add_param(grads, "b_k", grad.b_k);
      add_param(params, "b_v", p.b_v);
      add_param(grads, "b_v", grad.b_v);
      add_param(params, "b_o", p.b_o);
      add_param(grads, "b_o", grad.b_o);
      const double worst = detail::max_rel_fd(params, grads, loss, 1);
      detail_msg << tag << " " << worst << " ";
      return worst < 1e-5;
    };
    ok &= run_case(true, "mhsa");
    ok &= run_case(false, "mhca");

    FFNParams<double> fp(c, 4);
    fp.init(rng, 0.4);
    for (auto& v : fp.b1) v = rng.next_double() * 0.2 - 0.1;
    for (auto& v : fp.b2) v = rng.next_double() * 0.2 - 0.1;
    auto loss = [&]() {
      const auto y = ffn(xq, fp);
      double s = 0.0;
      for (double v : y.data) s += v * v;
      return 0.5 * s;
    };
    FFNCache<double> cache;
    const auto y = ffn(xq, fp, &cache);
    FFNParams<double> grad(c, 4);
    grad.zero();
    Matrix<double> dx = ffn_backward(y, cache, fp, grad);
    std::vector<ParamRef<double>> params, grads;
    add_param(params, "x", xq);
    add_param(grads, "x", dx);
    add_param(params, "w1", fp.w1);
    add_param(grads, "w1", grad.w1);
    add_param(params, "b1", fp.b1);
    add_param(grads, "b1", grad.b1);
    add_param(params, "w2", fp.w2);
    add_param(grads, "w2", grad.w2);
    add_param(params, "b2", fp.b2);
    add_param(grads, "b2", grad.b2);
    const double worst = detail::max_rel_fd(params, grads, loss, 1);
    ok &= worst < 1e-5;
    detail_msg << "ffn " << worst << " ";
  }

  // full pre-training loss, tiny test config
  {
    EncoderConfig ecfg;
    ecfg.depth = 1;
    ecfg.channels = 16;
    ecfg.heads = 4;
    ecfg.grid = {2, 2, 2};
    ecfg.region = {1, 2, 2};
    DecoderConfig dcfg;
    dcfg.depth = 1;
    dcfg.channels = 8;
    dcfg.heads = 2;
    PretrainModel<double> model(ecfg, dcfg);
    std::vector<ParamRef<double>> params;
    model.visit_params(params);
    Rng init_rng(7);
    detail::fill_uniform(params, init_rng, 0.4);

    const auto partition = make_partition(ecfg.grid, ecfg.region);
    const auto mask = sample_tube_mask(partition, 0.5, 3);
    VideoClip<double> clip(4, 32, 32);
    for (auto& v : clip.data) v = init_rng.next_double();
    const double lambda = 0.35;
    auto loss = [&]() {
      return pretrain_forward(model, clip, partition, mask, lambda, TargetNorm::kPerCube).total;
    };
    PretrainCache<double> cache;
    pretrain_forward(model, clip, partition, mask, lambda, TargetNorm::kPerCube, &cache);
    PretrainModel<double> grads(ecfg, dcfg);
    grads.zero();
    pretrain_backward(cache, model, grads, lambda);
    std::vector<ParamRef<double>> grad_refs;
    grads.visit_params(grad_refs);
    const double worst = detail::max_rel_fd(params, grad_refs, loss, 29);
    ok &= worst < 1e-4;
    detail_msg << "pipeline " << worst;
  }

  r.pass = ok;
  r.detail = "max rel errs: " + detail_msg.str();
  return r;
}

// --------------------------------------------------------------------------
// 4. masking invariants

inline CheckResult check_masking() {
  CheckResult r{4, "masking-invariants"};
  std::string msg;
  bool ok = true;
  const auto p = make_partition({8, 10, 10}, {2, 5, 10});
  for (std::uint64_t seed = 0; seed < 100 && ok; ++seed) {
    const auto mask = sample_tube_mask(p, 0.9, seed);
    if (mask.visible_count() != 80) {
      ok = false;
      msg = "global count != 80 at seed " + std::to_string(seed);
      break;
    }
    for (int reg = 0; reg < p.num_regions(); ++reg) {
      int n = 0;
      for (int i : p.region_token_indices(reg)) n += mask.visible[i];
      if (n != 10) {
        ok = false;
        msg = "per-region count != 10 at seed " + std::to_string(seed);
      }
    }
    for (int h = 0; h < 10 && ok; ++h)
      for (int w = 0; w < 10; ++w)
        for (int t = 1; t < 8; ++t)
          if (mask.visible[p.flat_index(t, h, w)] != mask.visible[p.flat_index(0, h, w)]) {
            ok = false;
            msg = "tube property violated at seed " + std::to_string(seed);
          }
  }

  if (ok) {
    // Masked values provably unread: bit-identical encoder outputs.
    EncoderConfig cfg;
    cfg.depth = 1;
    cfg.channels = 16;
    cfg.heads = 4;
    cfg.grid = {8, 10, 10};
    cfg.region = {2, 5, 10};
    EncoderWeights<double> w(cfg);
    w.init(5);
    TokenGrid<double> grid;
    grid.grid = cfg.grid;
    grid.tokens = Matrix<double>(800, 16);
    Rng rng(6);
    for (auto& v : grid.tokens.data) v = rng.next_double();
    const auto mask = sample_tube_mask(p, 0.9, 11);
    const auto base = encode(grid, p, &mask, w);
    auto perturbed = grid;
    for (int i = 0; i < 800; ++i)
      if (!mask.visible[i])
        for (int j = 0; j < 16; ++j) perturbed.tokens.at(i, j) = rng.next_double() * 1e6;
    const auto out = encode(perturbed, p, &mask, w);
    if (out.locals.data != base.locals.data || out.reps.data != base.reps.data) {
      ok = false;
      msg = "masked-token perturbation changed encoder outputs";
    }
  }
  r.pass = ok;
  r.detail = ok ? "100 seeds: 80 visible, 10 per region, tube holds; masked tokens unread" : msg;
  return r;
}

// --------------------------------------------------------------------------
// 5. loss algebra

inline CheckResult check_loss_algebra() {
  CheckResult r{5, "loss-algebra"};
  std::string msg;
  bool ok = true;
  EncoderConfig ecfg;
  ecfg.depth = 1;
  ecfg.channels = 16;
  ecfg.heads = 4;
  ecfg.grid = {2, 2, 2};
  ecfg.region = {1, 2, 2};
  DecoderConfig dcfg;
  dcfg.depth = 1;
  dcfg.channels = 8;
  dcfg.heads = 2;
  PretrainModel<double> model(ecfg, dcfg);
  model.init(31);
  const auto partition = make_partition(ecfg.grid, ecfg.region);
  const auto mask = sample_tube_mask(partition, 0.5, 32);
  VideoClip<double> clip(4, 32, 32);
  Rng rng(33);
  for (auto& v : clip.data) v = rng.next_double();

  for (double lambda : {0.0, 0.25, 0.5, 0.75, 1.0}) {
    const auto rep = pretrain_forward(model, clip, partition, mask, lambda, TargetNorm::kPerCube);
    if (rep.total != lambda * rep.appearance_mse + (1.0 - lambda) * rep.motion_mse) {
      ok = false;
      msg += "identity failed at lambda " + std::to_string(lambda) + "; ";
    }
  }

  // Gradient w.r.t. visible-position targets is exactly zero: perturbing
  // them leaves the loss bit-identical, and the backward rows vanish.
  PretrainCache<double> cache;
  const auto base = pretrain_forward(model, clip, partition, mask, 0.5, TargetNorm::kPerCube, &cache);
  auto tampered = cache.app_target;
  for (int i = 0; i < tampered.rows; ++i)
    if (mask.visible[i])
      for (int j = 0; j < tampered.cols; ++j) tampered.at(i, j) += 7.0;
  if (masked_mse(cache.predictions.appearance, tampered, mask) != base.appearance_mse) {
    ok = false;
    msg += "visible-target perturbation moved the loss; ";
  }
  const auto dpred = masked_mse_backward(cache.predictions.appearance, cache.app_target, mask, 1.0);
  for (int i = 0; i < dpred.rows; ++i)
    if (mask.visible[i])
      for (int j = 0; j < dpred.cols; ++j)
        if (dpred.at(i, j) != 0.0) {
          ok = false;
          msg += "nonzero gradient at a visible slot; ";
          i = dpred.rows;
          break;
        }
  r.pass = ok;
  r.detail = ok ? "identity exact for 5 lambdas; visible-position gradients exactly zero" : msg;
  return r;
}

// --------------------------------------------------------------------------
// 6. encoder structure

inline CheckResult check_encoder_structure() {
  CheckResult r{6, "encoder-structure"};
  std::string msg;
  bool ok = true;

  EncoderConfig cfg;
  cfg.depth = 2;
  cfg.channels = 16;
  cfg.heads = 4;
  cfg.grid = {2, 2, 2};
  cfg.region = {1, 1, 2};  // 4 regions
  EncoderWeights<double> w(cfg);
  w.init(61);

  Rng rng(62);
  const int n = 2;
  Matrix<double> locals(4 * n, 16);
  for (auto& v : locals.data) v = rng.next_double();
  Matrix<double> reps(4, 16);
  for (auto& v : reps.data) v = rng.next_double();

  Matrix<double> base_locals = locals;
  Matrix<double> base_reps = reps;
  encode_regions(base_locals, n, base_reps, w);

  const std::vector<int> perm{2, 0, 3, 1};
  Matrix<double> perm_locals(4 * n, 16);
  Matrix<double> perm_reps(4, 16);
  for (int i = 0; i < 4; ++i) {
    for (int rrow = 0; rrow < n; ++rrow)
      std::copy(locals.row(perm[i] * n + rrow), locals.row(perm[i] * n + rrow) + 16,
                perm_locals.row(i * n + rrow));
    std::copy(reps.row(perm[i]), reps.row(perm[i]) + 16, perm_reps.row(i));
  }
  encode_regions(perm_locals, n, perm_reps, w);
  for (int i = 0; i < 4 && ok; ++i) {
    for (int rrow = 0; rrow < n; ++rrow)
      for (int j = 0; j < 16; ++j)
        if (std::abs(perm_locals.at(i * n + rrow, j) - base_locals.at(perm[i] * n + rrow, j)) >
            1e-6) {
          ok = false;
          msg = "local outputs not equivariant under region permutation";
        }
    for (int j = 0; j < 16; ++j)
      if (std::abs(perm_reps.at(i, j) - base_reps.at(perm[i], j)) > 1e-6) {
        ok = false;
        msg = "rep outputs not equivariant under region permutation";
      }
  }

  if (ok) {
    EncoderConfig id_cfg = cfg;
    id_cfg.region = {1, 2, 2};
    EncoderWeights<double> wid(id_cfg);
    wid.init(63);
    for (auto& b : wid.blocks) {
      b.intra_att.w_o.zero();
      b.inter_att.w_o.zero();
      b.lgi_att.w_o.zero();
      b.ffn.w2.zero();
    }
    TokenGrid<double> grid;
    grid.grid = id_cfg.grid;
    grid.tokens = Matrix<double>(8, 16);
    for (auto& v : grid.tokens.data) v = rng.next_double();
    const auto partition = make_partition(id_cfg.grid, id_cfg.region);
    const auto out = encode<double>(grid, partition, nullptr, wid, nullptr, false);
    for (size_t i = 0; i < out.indices.size(); ++i)
      for (int j = 0; j < 16; ++j)
        if (out.locals.at(static_cast<int>(i), j) != grid.tokens.at(out.indices[i], j)) {
          ok = false;
          msg = "residual skeleton is not the identity on locals";
        }
    if (out.reps.data != wid.reps.data) {
      ok = false;
      msg = "residual skeleton is not the identity on reps";
    }
  }
  r.pass = ok;
  r.detail = ok ? "region-permutation equivariance at 1e-6; residual skeleton exact identity" : msg;
  return r;
}

// --------------------------------------------------------------------------
// 7. desk-scale learning (slow)

struct LearningConfig {
  int pretrain_clips = 2000;
  int pretrain_epochs = 5;
  int finetune_clips = 256;
  int finetune_epochs = 8;
};

inline nlohmann::json learning_pretrain_json(const std::string& out_dir, double lambda,
                                             const LearningConfig& lc) {
  return nlohmann::json{
      {"mode", "pretrain"},
      {"seed", 1234},
      {"model", {{"preset", "tiny"}, {"region", {2, 2, 2}}}},
      {"decoder", {{"depth", 4}, {"channels", 128}, {"heads", 2}}},
      {"rho", 0.75},
      {"lambda", lambda},
      {"epochs", lc.pretrain_epochs},
      {"batch", 32},
      {"base_lr", 6e-3},
      {"warmup_epochs", 1},
      {"data",
       {{"synthetic",
         {{"num_classes", 4}, {"video_frames", 24}, {"height", 32}, {"width", 32}, {"noise", 0.02},
          {"speed", 2}, {"train_clips", lc.pretrain_clips}, {"eval_clips", 128}}},
        {"clip_frames", 16},
        {"clip_stride", 1}}},
      {"out_dir", out_dir},
  };
}

inline CheckResult check_desk_scale_learning(const std::string& work_dir,
                                             const LearningConfig& lc = {}) {
  CheckResult r{7, "desk-scale-learning"};
  std::ostringstream msg;
  bool ok = true;

  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed_min = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 60.0;
  };

  double acc[2] = {0.0, 0.0};  // lambda = 0.5 then 1.0
  std::vector<double> joint_losses;
  for (int run = 0; run < 2; ++run) {
    const double lambda = run == 0 ? 0.5 : 1.0;
    const std::string tag = run == 0 ? "joint" : "appearance_only";
    const std::string pre_dir = work_dir + "/pretrain_" + tag;
    const auto pre_cfg = parse_run_config(learning_pretrain_json(pre_dir, lambda, lc));
    const auto pre = run_pretrain(pre_cfg);
    if (run == 0) {
      joint_losses = pre.epoch_loss;
      for (size_t e = 1; e < pre.epoch_loss.size(); ++e)
        if (!(pre.epoch_loss[e] < pre.epoch_loss[e - 1])) {
          ok = false;
          msg << "epoch-mean loss not monotonically decreasing at epoch " << e << "; ";
        }
    }

    nlohmann::json ft_json = learning_pretrain_json(work_dir + "/finetune_" + tag, lambda, lc);
    ft_json["mode"] = "finetune";
    ft_json["init_checkpoint"] = pre.checkpoint_path;
    ft_json["class_filter"] = {0, 1};
    ft_json["epochs"] = lc.finetune_epochs;
    ft_json["batch"] = 16;
    ft_json["base_lr"] = 4e-3;
    ft_json["warmup_epochs"] = 1;
    ft_json["freeze_encoder"] = true;
    ft_json["data"]["synthetic"]["train_clips"] = lc.finetune_clips;
    ft_json.erase("rho");
    ft_json.erase("lambda");
    const auto ft = run_finetune(parse_run_config(ft_json));
    acc[run] = ft.train_accuracy;
  }

  if (acc[0] < 0.90) {
    ok = false;
    msg << "joint pretraining train accuracy " << acc[0] << " < 0.90; ";
  }
  if (acc[0] - acc[1] < 0.05) {
    ok = false;
    msg << "joint-vs-appearance gap " << (acc[0] - acc[1]) << " < 0.05; ";
  }

  std::ostringstream d;
  d.precision(4);
  d << "epoch losses:";
  for (double l : joint_losses) d << " " << l;
  d << "; motion-pair train acc: joint " << acc[0] << " vs appearance-only " << acc[1] << " ("
    << elapsed_min() << " min)";
  r.pass = ok;
  r.detail = ok ? d.str() : msg.str() + " | " + d.str();
  return r;
}

// --------------------------------------------------------------------------
// 8. metrics oracle

inline CheckResult check_metrics_oracle() {
  CheckResult r{8, "metrics-oracle"};
  std::string msg;
  bool ok = true;
  {
    const auto rep = compute_metrics({0, 0, 0, 0}, {0, 0, 0, 1}, 2);
    if (rep.war != 0.75 || rep.uar != 0.5) {
      ok = false;
      msg += "hand case failed; ";
    }
  }
  Rng rng(88);
  for (int trial = 0; trial < 1000 && ok; ++trial) {
    const int ncls = 2 + static_cast<int>(rng.next_below(6));
    const int n = 1 + static_cast<int>(rng.next_below(50));
    std::vector<int> golds(n), preds(n);
    for (int i = 0; i < n; ++i) {
      golds[i] = static_cast<int>(rng.next_below(ncls));
      preds[i] = static_cast<int>(rng.next_below(ncls));
    }
    const auto rep = compute_metrics(preds, golds, ncls);
    int correct = 0;
    double recall_sum = 0.0;
    int present = 0;
    for (int cl = 0; cl < ncls; ++cl) {
      int gold_count = 0, hit = 0;
      for (int i = 0; i < n; ++i)
        if (golds[i] == cl) {
          ++gold_count;
          hit += preds[i] == cl;
        }
      correct += hit;
      if (gold_count > 0) {
        recall_sum += static_cast<double>(hit) / gold_count;
        ++present;
      }
    }
    if (rep.war != static_cast<double>(correct) / n ||
        rep.uar != (present > 0 ? recall_sum / present : 0.0)) {
      ok = false;
      msg = "mismatch against counting oracle at trial " + std::to_string(trial);
    }
  }
  r.pass = ok;
  r.detail = ok ? "hand case and 1000 random vectors match the counting oracle exactly" : msg;
  return r;
}

// --------------------------------------------------------------------------
// 9. reproducibility

inline CheckResult check_reproducibility(const std::string& work_dir) {
  CheckResult r{9, "reproducibility"};
  std::string msg;
  bool ok = true;

  nlohmann::json j{
      {"mode", "pretrain"},
      {"seed", 9},
      {"model",
       {{"preset", "custom"}, {"depth", 2}, {"channels", 32}, {"heads", 4}, {"region", {2, 2, 2}}}},
      {"decoder", {{"depth", 1}, {"channels", 16}, {"heads", 2}}},
      {"rho", 0.75},
      {"lambda", 0.5},
      {"epochs", 1},
      {"batch", 8},
      {"base_lr", 1e-3},
      {"warmup_epochs", 0},
      {"data",
       {{"synthetic",
         {{"num_classes", 2}, {"video_frames", 12}, {"height", 32}, {"width", 32},
          {"train_clips", 16}}},
        {"clip_frames", 8}}},
      {"out_dir", work_dir + "/repro_a"},
  };
  const auto r1 = run_pretrain(parse_run_config(j));
  j["out_dir"] = work_dir + "/repro_b";
  const auto r2 = run_pretrain(parse_run_config(j));
  std::ifstream f1(r1.checkpoint_path, std::ios::binary), f2(r2.checkpoint_path, std::ios::binary);
  const std::vector<char> b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  const std::vector<char> b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  if (b1.empty() || b1 != b2) {
    ok = false;
    msg += "checkpoints differ across identical runs; ";
  }

  // Stitching identity: a raw-mode clip rebuilt from its own targets.
  VideoClip<double> clip(8, 32, 32);
  Rng rng(91);
  for (auto& v : clip.data) v = rng.next_double();
  const auto targets = build_targets(clip);
  Matrix<double> app, mot;
  patchify_targets(targets, app, mot);
  TubeMask mask;
  mask.grid = {4, 2, 2};
  mask.rho = 0.5;
  mask.visible.assign(16, 0);
  const auto rebuilt = stitch_reconstruction(app, mot, targets, mask, false);
  if (rebuilt.data != clip.data) {
    ok = false;
    msg += "stitching identity not exact in raw mode; ";
  }
  r.pass = ok;
  r.detail = ok ? "bit-identical checkpoints; raw stitching identity exact" : msg;
  return r;
}

// --------------------------------------------------------------------------

inline std::vector<CheckResult> run_all(bool include_slow, const std::string& work_dir) {
  std::filesystem::create_directories(work_dir);
  std::vector<CheckResult> results;
  const auto timed = [&](CheckResult (*fn)()) {
    const auto t0 = std::chrono::steady_clock::now();
    CheckResult res = fn();
    res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    results.push_back(res);
  };
  timed(check_params);
  timed(check_flops);
  timed(check_gradients);
  timed(check_masking);
  timed(check_loss_algebra);
  timed(check_encoder_structure);
  if (include_slow) {
    const auto t0 = std::chrono::steady_clock::now();
    CheckResult res = check_desk_scale_learning(work_dir);
    res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    results.push_back(res);
  }
  timed(check_metrics_oracle);
  {
    const auto t0 = std::chrono::steady_clock::now();
    CheckResult res = check_reproducibility(work_dir);
    res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    results.push_back(res);
  }
  return results;
}

inline int report(const std::vector<CheckResult>& results) {
  int failures = 0;
  for (const auto& r : results) {
    std::printf("[%s] %d %s (%.1fs): %s\n", r.pass ? "PASS" : "FAIL", r.id, r.name.c_str(),
                r.seconds, r.detail.c_str());
    failures += r.pass ? 0 : 1;
  }
  std::fflush(stdout);
  return failures;
}

}  // namespace lgmae::selfcheck
