// Command-line front end: pretrain / finetune / eval / flops / reconstruct /
// selftest. Training and evaluation runs are driven by a JSON config file;
// the flops meter also works from flags alone.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "lgmae/selfcheck.hpp"
#include "lgmae/train.hpp"

namespace {

using namespace lgmae;

void print_cost_table(const CostReport& report, const char* what) {
  std::printf("%-12s %15s\n", what, "count");
  for (const auto& [stage, value] : (std::string(what) == "params" ? report.params_by_stage
                                                                   : report.flops_by_stage))
    std::printf("  %-10s %15llu\n", stage.c_str(), static_cast<unsigned long long>(value));
  std::printf("  %-10s %15llu\n", "total",
              static_cast<unsigned long long>(std::string(what) == "params" ? report.params
                                                                            : report.flops));
}

nlohmann::json cost_report_json(const CostReport& params, const CostReport& flops) {
  nlohmann::json j;
  j["params"] = params.params;
  j["params_by_stage"] = params.params_by_stage;
  j["flops"] = flops.flops;
  j["flops_by_stage"] = flops.flops_by_stage;
  j["aux_flops"] = flops.aux_flops;
  j["flop_convention"] = "1 multiply-accumulate = 1 FLOP; softmax/LN/GELU in aux_flops";
  return j;
}

int run_flops(const std::string& preset, const std::string& stages, std::vector<int> grid,
              std::vector<int> region, int classes, int visible, bool with_decoder,
              const std::string& json_path) {
  EncoderConfig cfg;
  if (preset == "tiny")
    cfg = EncoderConfig::tiny();
  else if (preset == "small")
    cfg = EncoderConfig::small();
  else if (preset == "base")
    cfg = EncoderConfig::base();
  else if (preset == "vit")
    cfg = EncoderConfig::vit_base();
  else {
    std::fprintf(stderr, "unknown preset '%s' (tiny|small|base|vit)\n", preset.c_str());
    return 2;
  }
  if (!stages.empty()) {
    cfg.stages.intra = stages.find("intra") != std::string::npos;
    cfg.stages.inter = stages.find("inter") != std::string::npos;
    cfg.stages.lgi = stages.find("lgi") != std::string::npos;
  }
  if (grid.size() == 3) cfg.grid = {grid[0], grid[1], grid[2]};
  if (region.size() == 3) cfg.region = {region[0], region[1], region[2]};

  const CostReport params = count_params(cfg, classes);
  const CostReport flops = count_flops(cfg, cfg.grid, visible, classes);
  CostReport flops_total = flops;
  if (with_decoder) {
    const DecoderConfig dec;  // paper decoder: 4 blocks, 384 channels
    const int vis = visible >= 0 ? visible : cfg.grid.tokens();
    const CostReport d = count_decoder_flops(dec, cfg.channels, cfg.grid, vis);
    for (const auto& [k, v] : d.flops_by_stage) flops_total.add_flops(k, v);
    flops_total.aux_flops += d.aux_flops;
  }

  std::printf("model %s, grid %dx%dx%d", preset.c_str(), cfg.grid.t, cfg.grid.h, cfg.grid.w);
  if (!cfg.vit_global)
    std::printf(", region %dx%dx%d", cfg.region.t, cfg.region.h, cfg.region.w);
  std::printf("\n");
  print_cost_table(params, "params");
  print_cost_table(flops_total, "flops");
  std::printf("aux (softmax/LN/GELU) flops: %llu\n",
              static_cast<unsigned long long>(flops_total.aux_flops));
  std::printf("params: %.1fM   flops: %.1fG\n", params.params / 1e6, flops_total.flops / 1e9);

  if (!json_path.empty()) {
    std::ofstream out(json_path);
    out << cost_report_json(params, flops_total).dump(2) << "\n";
    std::printf("wrote %s\n", json_path.c_str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"lgmae: masked video autoencoder with a local-global interaction encoder"};
  app.require_subcommand(1);

  std::string config_path;
  auto* pretrain = app.add_subcommand("pretrain", "masked appearance+motion pre-training");
  pretrain->add_option("--config", config_path, "JSON run config")->required();
  auto* finetune = app.add_subcommand("finetune", "supervised fine-tuning of the encoder");
  finetune->add_option("--config", config_path, "JSON run config")->required();
  auto* eval = app.add_subcommand("eval", "evaluate a fine-tuned checkpoint (UAR/WAR)");
  eval->add_option("--config", config_path, "JSON run config")->required();
  auto* reconstruct = app.add_subcommand("reconstruct", "dump a reconstruction image sheet");
  reconstruct->add_option("--config", config_path, "JSON run config")->required();

  std::string preset = "base", stages, flops_json;
  std::vector<int> grid{8, 10, 10}, region;
  int classes = 0, visible = -1;
  bool with_decoder = false;
  auto* flops = app.add_subcommand("flops", "analytic parameter/FLOPs meter");
  flops->add_option("--preset", preset, "tiny|small|base|vit");
  flops->add_option("--stages", stages, "enabled stages, e.g. intra,inter,lgi");
  flops->add_option("--grid", grid, "token grid t,h,w")->expected(3);
  flops->add_option("--region", region, "region size t,h,w")->expected(3);
  flops->add_option("--classes", classes, "count a classifier head for N classes");
  flops->add_option("--visible", visible, "visible tokens (pre-training view)");
  flops->add_flag("--decoder", with_decoder, "include the pre-training decoder");
  flops->add_option("--json", flops_json, "write the report as JSON");

  bool quick = false;
  std::string work_dir = (std::filesystem::temp_directory_path() / "lgmae_selftest").string();
  auto* selftest = app.add_subcommand("selftest", "run the acceptance suite");
  selftest->add_flag("--quick", quick, "skip the slow desk-scale learning criterion");
  selftest->add_option("--work-dir", work_dir, "scratch directory for training artifacts");

  CLI11_PARSE(app, argc, argv);

  try {
    if (pretrain->parsed()) {
      const auto cfg = load_run_config(config_path);
      if (cfg.mode != RunMode::kPretrain) throw ConfigError("config mode is not 'pretrain'");
      const auto result = run_pretrain(cfg);
      for (size_t e = 0; e < result.epoch_loss.size(); ++e)
        std::printf("epoch %zu: loss %.6f (appearance %.6f, motion %.6f)\n", e,
                    result.epoch_loss[e], result.epoch_loss_appearance[e],
                    result.epoch_loss_motion[e]);
      std::printf("checkpoint: %s\n", result.checkpoint_path.c_str());
    } else if (finetune->parsed()) {
      const auto cfg = load_run_config(config_path);
      if (cfg.mode != RunMode::kFinetune) throw ConfigError("config mode is not 'finetune'");
      const auto result = run_finetune(cfg);
      for (size_t e = 0; e < result.epoch_loss.size(); ++e)
        std::printf("epoch %zu: loss %.6f\n", e, result.epoch_loss[e]);
      std::printf("train accuracy: %.4f\ncheckpoint: %s\n", result.train_accuracy,
                  result.checkpoint_path.c_str());
    } else if (eval->parsed()) {
      const auto cfg = load_run_config(config_path);
      if (cfg.mode != RunMode::kEval) throw ConfigError("config mode is not 'eval'");
      const auto result = run_eval(cfg);
      std::printf("UAR %.4f  WAR %.4f  (skipped empty classes: %d)\n", result.report.uar,
                  result.report.war, result.report.skipped_classes);
      for (size_t c = 0; c < result.report.per_class_recall.size(); ++c)
        if (result.report.per_class_recall[c] >= 0)
          std::printf("  class %zu recall %.4f\n", c, result.report.per_class_recall[c]);
      if (!result.csv_path.empty()) std::printf("predictions: %s\n", result.csv_path.c_str());
    } else if (reconstruct->parsed()) {
      const auto cfg = load_run_config(config_path);
      if (cfg.mode != RunMode::kReconstruct) throw ConfigError("config mode is not 'reconstruct'");
      const auto result = run_reconstruct(cfg);
      std::printf("loss %.6f (appearance %.6f, motion %.6f)\nimage sheet: %s\n", result.loss.total,
                  result.loss.appearance_mse, result.loss.motion_mse,
                  result.grid_image_path.c_str());
    } else if (flops->parsed()) {
      return run_flops(preset, stages, grid, region, classes, visible, with_decoder, flops_json);
    } else if (selftest->parsed()) {
      const auto results = lgmae::selfcheck::run_all(!quick, work_dir);
      const int failures = lgmae::selfcheck::report(results);
      if (quick) std::printf("[SKIP] 7 desk-scale-learning (run without --quick)\n");
      return failures == 0 ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
