#pragma once

#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "roadseg/config.hpp"
#include "roadseg/selfcheck.hpp"

namespace roadseg {

/// Process exit codes shared by every command.
enum ExitCode : int {
  kExitOk = 0,
  kExitConfig = 2,
  kExitAbort = 3,
  kExitData = 4,
  kExitSelfCheck = 5,
};

namespace detail {

inline std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && is_supported_image(e.path())) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

} // namespace detail

/// Split, train, and write split.txt, train.log and checkpoints under
/// cfg.output_dir.
inline int cmd_train(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  namespace fs = std::filesystem;
  try {
    cfg.validate();
    if (!fs::is_directory(cfg.dataset_dir)) throw ConfigError("dataset directory not found: " + cfg.dataset_dir.string());
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  }

  try {
    auto entries = scan_dataset(cfg.dataset_dir, cfg.image_suffix, cfg.mask_suffix);
    if (entries.size() < 2)
      throw IoError("dataset " + cfg.dataset_dir.string() + " has " + std::to_string(entries.size()) +
                    " image/mask pairs, need at least 2");
    auto data = Dataset::from_entries(std::move(entries), static_cast<std::uint8_t>(cfg.mask_threshold));
    const auto split = split_dataset(data.ids(), cfg.holdout_fraction, cfg.train.seed);

    fs::create_directories(cfg.output_dir);
    write_split_manifest(split, cfg.output_dir / "split.txt");
    std::ofstream log(cfg.output_dir / "train.log", std::ios::binary);
    if (!log) throw IoError("cannot write " + (cfg.output_dir / "train.log").string());

    auto tc = cfg.train;
    tc.checkpoint_dir = cfg.output_dir;
    Model<float> model(cfg.model, tc.seed);
    out << "training on " << split.train_ids.size() << " images, holding out " << split.holdout_ids.size() << '\n';
    const auto history = train(model, data, split, tc, &log);
    out << detail::format_line("best iou=%.6f at iteration %lld", history.best_iou,
                               static_cast<long long>(history.best_iteration))
        << '\n';
    return kExitOk;
  } catch (const TrainingAbort& e) {
    err << "training aborted: " << e.what() << '\n';
    return kExitAbort;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const Error& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  }
}

struct PredictOptions {
  TtaConfig tta;
  bool overlay = false;
  int workers = 1;
};

/// Writes `<stem>.png` (and `<stem>_overlay.png` with overlay on) for every
/// readable image in input_dir. Unreadable inputs are skipped with a warning.
inline int cmd_predict(const std::filesystem::path& checkpoint, const std::filesystem::path& input_dir,
                       const std::filesystem::path& output_dir, const PredictOptions& opt, std::ostream& out,
                       std::ostream& err) {
  namespace fs = std::filesystem;
  std::optional<LoadedCheckpoint> ckpt;
  try {
    opt.tta.validate();
    if (opt.workers < 1) throw ConfigError("workers must be at least 1");
    ckpt.emplace(load_checkpoint(checkpoint));
  } catch (const Error& e) {
    err << "cannot use checkpoint: " << e.what() << '\n';
    return kExitConfig;
  }

  std::vector<fs::path> inputs;
  try {
    if (!fs::is_directory(input_dir)) throw IoError("input directory not found: " + input_dir.string());
    inputs = detail::list_images(input_dir);
    if (inputs.empty()) throw IoError("no images in " + input_dir.string());
    fs::create_directories(output_dir);
  } catch (const std::exception& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  }

  const ModelPredictor net(ckpt->model);
  std::vector<std::string> messages(inputs.size());
  std::vector<char> ok(inputs.size(), 0);
  std::atomic<std::size_t> cursor{0};
  auto worker = [&] {
    for (std::size_t i; (i = cursor++) < inputs.size();) {
      const auto& path = inputs[i];
      try {
        const auto image = to_rgb(read_image(path));
        const auto pred = predict(net, image, opt.tta, path.stem().string());
        const auto stem = path.stem().string();
        write_mask(pred.mask, output_dir / (stem + ".png"));
        if (opt.overlay) write_overlay(image, pred.mask, output_dir / (stem + "_overlay.png"));
        ok[i] = 1;
        messages[i] = path.filename().string() + " -> " + stem + ".png";
      } catch (const std::exception& e) {
        messages[i] = "warning: skipping " + path.string() + ": " + e.what();
      }
    }
  };
  const int n = std::min<int>(opt.workers, static_cast<int>(inputs.size()));
  std::vector<std::thread> pool;
  for (int t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  std::size_t written = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    (ok[i] ? out : err) << messages[i] << '\n';
    written += ok[i];
  }
  if (written == 0) {
    err << "data error: no input could be processed\n";
    return kExitData;
  }
  return kExitOk;
}

/// Per-image IoU between same-named masks, both binarized at 128.
inline int cmd_eval(const std::filesystem::path& pred_dir, const std::filesystem::path& gt_dir, std::ostream& out,
                    std::ostream& err) {
  namespace fs = std::filesystem;
  try {
    for (const auto& d : {pred_dir, gt_dir})
      if (!fs::is_directory(d)) throw IoError("directory not found: " + d.string());
    std::map<std::string, fs::path> preds, gts;
    for (const auto& p : detail::list_images(pred_dir)) preds[p.stem().string()] = p;
    for (const auto& p : detail::list_images(gt_dir)) gts[p.stem().string()] = p;

    std::vector<std::string> unmatched;
    for (const auto& [k, p] : preds)
      if (!gts.count(k)) unmatched.push_back(p.string());
    for (const auto& [k, p] : gts)
      if (!preds.count(k)) unmatched.push_back(p.string());
    if (!unmatched.empty()) {
      err << "unmatched files:\n";
      for (const auto& u : unmatched) err << "  " << u << '\n';
      return kExitData;
    }
    if (preds.empty()) throw IoError("no masks in " + pred_dir.string());

    double sum = 0.0;
    for (const auto& [name, p] : preds) {
      const auto pm = binarize_gray(to_gray(read_image(p)));
      const auto gm = binarize_gray(to_gray(read_image(gts.at(name))));
      if (pm.height != gm.height || pm.width != gm.width)
        throw PairingError(name + ": prediction is " + std::to_string(pm.height) + "x" + std::to_string(pm.width) +
                           " but ground truth is " + std::to_string(gm.height) + "x" + std::to_string(gm.width));
      const double iou = eval_iou(pm, gm);
      sum += iou;
      out << detail::format_line("%s iou=%.4f", name.c_str(), iou) << '\n';
    }
    out << detail::format_line("mean_iou=%.4f", sum / static_cast<double>(preds.size())) << '\n';
    return kExitOk;
  } catch (const std::exception& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  }
}

/// Gradient and oracle suites. Exit 5 names every failing check.
inline int cmd_selfcheck(const SelfCheckOptions& opt, std::ostream& out, std::ostream& err) {
  if (!opt.broken_op.empty()) {
    const auto ops = gradient_suite_ops();
    if (std::find(ops.begin(), ops.end(), opt.broken_op) == ops.end()) {
      err << "config error: unknown op '" << opt.broken_op << "'\n";
      return kExitConfig;
    }
  }
  std::vector<std::string> failed;
  for (const auto& r : run_gradient_suite(opt)) {
    const bool pass = r.max_rel_err < kGradTolerance;
    out << detail::format_line("grad %-18s max_rel_err=%.3e checked=%zu %s", r.op_name.c_str(), r.max_rel_err,
                               r.num_params_checked, pass ? "ok" : "FAIL")
        << '\n';
    if (!pass) failed.push_back(r.op_name);
  }
  for (const auto& r : run_oracle_suite(opt)) {
    out << detail::format_line("oracle %-30s max_err=%.3e tol=%.0e %s", r.name.c_str(), r.max_err, r.tolerance,
                               r.passed() ? "ok" : "FAIL")
        << '\n';
    if (!r.passed()) failed.push_back(r.name);
  }
  if (!failed.empty()) {
    err << "self-check failed:";
    for (const auto& f : failed) err << ' ' << f;
    err << '\n';
    return kExitSelfCheck;
  }
  out << "self-check passed\n";
  return kExitOk;
}

} // namespace roadseg
