#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "roadseg/commands.hpp"

int main(int argc, char** argv) {
  using namespace roadseg;
  CLI::App app{"Road segmentation: train, predict, evaluate, self-check"};
  app.require_subcommand(1);
  int workers = -1;
  app.add_option("--workers", workers, "Cap on worker threads")->check(CLI::NonNegativeNumber);

  auto* train_cmd = app.add_subcommand("train", "Train a model from a config file");
  std::string config_path;
  std::vector<std::string> overrides;
  train_cmd->add_option("config", config_path, "key = value config file")->required();
  train_cmd->add_option("--set", overrides, "Override a config key (key=value)");

  auto* predict_cmd = app.add_subcommand("predict", "Write masks for every image in a directory");
  std::string ckpt, in_dir, out_dir;
  PredictOptions popt;
  predict_cmd->add_option("checkpoint", ckpt)->required();
  predict_cmd->add_option("input_dir", in_dir)->required();
  predict_cmd->add_option("output_dir", out_dir)->required();
  predict_cmd->add_flag("--tta,!--no-tta", popt.tta.enabled, "Average four 90 degree rotations (default on)");
  predict_cmd->add_option("--threshold", popt.tta.threshold, "Binarization threshold in (0, 1)");
  predict_cmd->add_flag("--overlay", popt.overlay, "Also write <name>_overlay.png");

  auto* eval_cmd = app.add_subcommand("eval", "Mean IoU between prediction and ground-truth masks");
  std::string pred_dir, gt_dir;
  eval_cmd->add_option("pred_dir", pred_dir)->required();
  eval_cmd->add_option("gt_dir", gt_dir)->required();

  auto* self_cmd = app.add_subcommand("selfcheck", "Gradient and loss/metric oracle suites");
  SelfCheckOptions sopt;
  self_cmd->add_option("--break-op", sopt.broken_op, "Corrupt one op's backward (negative control)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  if (train_cmd->parsed()) {
    RunConfig cfg;
    try {
      cfg = load_config(config_path);
      for (const auto& o : overrides) apply_override(cfg, o);
      if (workers >= 0) cfg.train.workers = workers;
    } catch (const ConfigError& e) {
      std::cerr << "config error: " << e.what() << '\n';
      return kExitConfig;
    }
    return cmd_train(cfg, std::cout, std::cerr);
  }
  if (predict_cmd->parsed()) {
    popt.workers = workers > 0 ? workers : 1;
    return cmd_predict(ckpt, in_dir, out_dir, popt, std::cout, std::cerr);
  }
  if (eval_cmd->parsed()) return cmd_eval(pred_dir, gt_dir, std::cout, std::cerr);
  return cmd_selfcheck(sopt, std::cout, std::cerr);
}
