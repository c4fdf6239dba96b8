// Acceptance harness: one PASS/FAIL line per criterion, exit 1 on any failure.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <iterator>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "roadseg/infer.hpp"
#include "roadseg/selfcheck.hpp"
#include "roadseg/trainer.hpp"
#include "synthetic.hpp"

using namespace roadseg;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool same_bits(std::span<const float> a, std::span<const float> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

bool same_bits(const ProbMap& a, const ProbMap& b) {
  return a.height == b.height && a.width == b.width && same_bits(a.data, b.data);
}

Image random_image(Rng& rng, int h, int w) {
  Image img(h, w, 3);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(uniform_int(rng, 0, 255));
  return img;
}

// --- 1 ---------------------------------------------------------------------

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  const auto reports = run_gradient_suite();
  const double secs = seconds_since(t0);
  double worst = 0.0;
  std::string worst_op, failed;
  std::size_t probes = 0;
  for (const auto& r : reports) {
    probes += r.num_params_checked;
    if (r.max_rel_err >= worst) worst = r.max_rel_err, worst_op = r.op_name;
    if (!(r.max_rel_err < 1e-4)) failed += " " + r.op_name;
  }
  const auto ops = gradient_suite_ops();
  const std::set<std::string> have(ops.begin(), ops.end());
  std::string missing;
  for (const char* op : {"conv2d", "conv_transpose2d", "maxpool2d", "batchnorm2d", "relu", "sigmoid",
                         "concat_channels", "add", "soft_jaccard", "bce", "combined_loss"})
    if (!have.count(op)) missing += std::string(" ") + op;
  const bool ok = failed.empty() && missing.empty() && secs < 60.0 && SelfCheckOptions{}.instances >= 5;
  return {ok, fmt("%zu ops, %zu probes, worst rel err %.3g (%s), %.1fs%s%s", reports.size(), probes, worst,
                  worst_op.c_str(), secs, failed.empty() ? "" : (" failing:" + failed).c_str(),
                  missing.empty() ? "" : (" missing:" + missing).c_str())};
}

// --- 2 ---------------------------------------------------------------------

Outcome end_to_end_gradient() {
  const auto t0 = Clock::now();
  auto m = Model<float>(ModelConfig::reduced(), 101).cast<double>();
  m.set_mode(Mode::train);
  Rng rng(102);
  std::vector<double> xv(4 * 3 * 32 * 32), yv(4 * 32 * 32);
  for (auto& v : xv) v = uniform01(rng);
  for (auto& v : yv) v = bernoulli(rng, 0.3) ? 1.0 : 0.0;
  const auto x = Tensor<double>::from_data({4, 3, 32, 32}, xv);
  const auto y = Tensor<double>::from_data({4, 1, 32, 32}, yv);
  std::vector<Tensor<double>> wrt;
  for (const auto& p : m.parameters()) wrt.push_back(p.tensor);

  // 20 scalars drawn uniformly over all parameter elements
  std::vector<std::size_t> offsets{0};
  for (const auto& t : wrt) offsets.push_back(offsets.back() + t.numel());
  std::vector<GradProbe> probes;
  for (int i = 0; i < 20; ++i) {
    const auto flat = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(offsets.back()) - 1));
    const auto k = static_cast<std::size_t>(std::upper_bound(offsets.begin(), offsets.end(), flat) - offsets.begin() - 1);
    probes.push_back({k, flat - offsets[k]});
  }
  const auto r = grad_check(
      "model",
      [&] {
        m.reseed_dropout(103); // same dropout mask on every evaluation
        return combined_loss(m.forward(x), y);
      },
      wrt, 1e-6, probes);
  const double secs = seconds_since(t0);
  return {r.max_rel_err < 1e-3 && r.num_params_checked == 20 && secs < 300.0,
          fmt("%zu probes over %zu parameters, max rel err %.3g, %.1fs", r.num_params_checked, offsets.back(),
              r.max_rel_err, secs)};
}

// --- 3 ---------------------------------------------------------------------

double jaccard_loop(const std::vector<double>& y, const std::vector<double>& p) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += (y[i] * p[i] + 1e-7) / (y[i] + p[i] - y[i] * p[i] + 1e-7);
  return s / static_cast<double>(y.size());
}

double bce_loop(const std::vector<double>& y, const std::vector<double>& p) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double c = std::clamp(p[i], 1e-7, 1.0 - 1e-7);
    s -= y[i] > 0.5 ? std::log(c) : std::log1p(-c);
  }
  return s / static_cast<double>(y.size());
}

Outcome loss_oracles() {
  Rng rng(301);
  double ej = 0.0, eh = 0.0, el = 0.0;
  for (int k = 0; k < 100; ++k) {
    const auto n = static_cast<std::size_t>(uniform_int(rng, 1, 256));
    std::vector<double> y(n), p(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = bernoulli(rng, 0.4) ? 1.0 : 0.0;
      p[i] = uniform01(rng);
    }
    const auto yt = Tensor<double>::from_data({static_cast<std::int64_t>(n)}, y);
    const auto pt = Tensor<double>::from_data({static_cast<std::int64_t>(n)}, p);
    const double j = jaccard_loop(y, p), h = bce_loop(y, p);
    ej = std::max(ej, std::abs(soft_jaccard(pt, yt).item() - j));
    eh = std::max(eh, std::abs(bce(pt, yt).item() - h));
    el = std::max(el, std::abs(combined_loss(pt, yt).item() - (0.7 * h + 0.3 * (1.0 - j))));
  }
  auto one = [](double v) { return Tensor<double>::from_data({1}, {v}); };
  const double j_half = soft_jaccard(one(0.5), one(1.0)).item();
  const double h_half = bce(one(0.5), one(1.0)).item();
  // y = 0, p = 1 - 1/e gives H = 1 and J = eps/(p + eps), i.e. J = 0 to 1.6e-7
  const double l_anchor = combined_loss(one(1.0 - std::exp(-1.0)), one(0.0)).item();
  const bool ok = ej <= 1e-6 && eh <= 1e-6 && el <= 1e-6 && std::abs(j_half - 0.5) <= 1e-6 &&
                  std::abs(h_half - std::log(2.0)) <= 1e-6 && std::abs(l_anchor - 1.0) <= 1e-6;
  return {ok, fmt("max abs err J %.2g H %.2g L %.2g; J(1,0.5)=%.9f H(1,0.5)=%.9f L=%.9f", ej, eh, el, j_half, h_half,
                  l_anchor)};
}

// --- 4 ---------------------------------------------------------------------

Outcome metric_exactness() {
  Rng rng(401);
  int mismatches = 0, both_empty = 0;
  for (int k = 0; k < 1000; ++k) {
    const int h = static_cast<int>(uniform_int(rng, 1, 6)), w = static_cast<int>(uniform_int(rng, 1, 6));
    const double density = k % 20 == 0 ? 0.0 : uniform01(rng);
    Mask a(h, w), b(h, w);
    std::set<int> sa, sb;
    for (int i = 0; i < h * w; ++i) {
      if (bernoulli(rng, density)) a.data[static_cast<std::size_t>(i)] = 1, sa.insert(i);
      if (bernoulli(rng, density)) b.data[static_cast<std::size_t>(i)] = 1, sb.insert(i);
    }
    std::vector<int> inter, uni;
    std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(inter));
    std::set_union(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(uni));
    if (uni.empty()) ++both_empty;
    const double ref = uni.empty() ? 1.0 : static_cast<double>(inter.size()) / static_cast<double>(uni.size());
    if (eval_iou(a.data, b.data) != ref) ++mismatches;
  }
  Mask pred(2, 2), gt(2, 2);
  pred.data = {1, 1, 0, 0};
  gt.data = {0, 1, 0, 1};
  const double hand = eval_iou(pred.data, gt.data);
  return {mismatches == 0 && both_empty > 0 && hand == 1.0 / 3.0,
          fmt("1000 pairs, %d mismatches, %d both-empty; hand case %.17g", mismatches, both_empty, hand)};
}

// --- 5 and 7 ---------------------------------------------------------------

struct OverfitRun {
  TrainHistory history;
  std::string log;
  std::vector<std::pair<std::string, std::string>> checkpoints; // file name, bytes
  double seconds = 0.0;
};

OverfitRun overfit_run(const fs::path& ckpt_dir) {
  const auto t0 = Clock::now();
  auto data = Dataset::in_memory(testkit::synthetic_roads(501, 16, 64));
  DatasetSplit split;
  split.train_ids = data.ids();
  TrainConfig c;
  c.lr0 = 1e-3;
  c.batch_size = 4;
  c.max_iterations = 300;
  c.eval_every = 50;
  c.augment_enabled = false;
  c.eval_set = EvalSet::train;
  c.seed = 502;
  c.checkpoint_dir = ckpt_dir;
  Model<float> model(ModelConfig::reduced(), 503);
  OverfitRun run;
  std::ostringstream log;
  run.history = train(model, data, split, c, &log);
  run.log = log.str();
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(ckpt_dir)) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) run.checkpoints.emplace_back(f.filename().string(), slurp(f));
  run.seconds = seconds_since(t0);
  return run;
}

Outcome overfit(const OverfitRun& r) {
  const auto& last = r.history.evals.back();
  const bool ok = last.iteration == 300 && last.iou >= 0.90 && r.seconds < 600.0;
  return {ok, fmt("training-set IoU %.4f at iteration %lld (best %.4f), first loss %.4f, last loss %.4f, %.1fs",
                  last.iou, static_cast<long long>(last.iteration), r.history.best_iou, r.history.losses.front(),
                  r.history.losses.back(), r.seconds)};
}

Outcome determinism(const OverfitRun& a, const OverfitRun& b) {
  const bool logs = !a.log.empty() && a.log == b.log;
  const bool ckpts = !a.checkpoints.empty() && a.checkpoints == b.checkpoints;
  std::size_t bytes = 0;
  for (const auto& [_, data] : a.checkpoints) bytes += data.size();
  return {logs && ckpts, fmt("log %zu bytes %s; %zu checkpoint files (%zu bytes) %s", a.log.size(),
                             logs ? "identical" : "DIFFER", a.checkpoints.size(), bytes, ckpts ? "identical" : "DIFFER")};
}

// --- 6 ---------------------------------------------------------------------

struct ConstantNet {
  float value;
  Tensor<float> operator()(const Tensor<float>& x) const { return Tensor<float>::full({1, 1, x.dim(2), x.dim(3)}, value); }
};

// pointwise in the pixel grid, hence commutes with quarter turns
struct PixelwiseNet {
  Tensor<float> operator()(const Tensor<float>& x) const {
    return sigmoid(add(slice_channels(x, 0, 1), scale_mul(slice_channels(x, 2, 3), -0.5)));
  }
};

Outcome tta_contracts() {
  Rng rng(601);
  bool constant_ok = true, equivariant_ok = true, rotation_ok = true;
  for (float c : {0.0f, 0.123f, 0.5f, 0.987f, 1.0f}) {
    const auto out = tta_predict(ConstantNet{c}, random_image(rng, 64, 96));
    constant_ok = constant_ok && std::all_of(out.data.begin(), out.data.end(), [c](float v) { return v == c; });
  }
  for (auto [h, w] : {std::pair{64, 64}, std::pair{32, 96}, std::pair{45, 70}}) {
    const auto img = random_image(rng, h, w);
    equivariant_ok = equivariant_ok && same_bits(tta_predict(PixelwiseNet{}, img), predict_full(PixelwiseNet{}, img));
  }
  for (auto [h, w] : {std::pair{7, 11}, std::pair{64, 64}, std::pair{1, 5}}) {
    const auto img = random_image(rng, h, w);
    ProbMap m{h, w, std::vector<float>(static_cast<std::size_t>(h) * w)};
    for (auto& v : m.data) v = static_cast<float>(uniform01(rng));
    for (int k = 0; k < 4; ++k) {
      rotation_ok = rotation_ok && rotate_cw(rotate_ccw(img, k), k) == img;
      rotation_ok = rotation_ok && same_bits(rotate_cw(rotate_ccw(m, k), k), m);
    }
    rotation_ok = rotation_ok && rotate_ccw(rotate_ccw(rotate_ccw(rotate_ccw(img, 1), 1), 1), 1) == img;
  }
  return {constant_ok && equivariant_ok && rotation_ok,
          fmt("constant mock %s, equivariant mock %s, rotation round trips %s", constant_ok ? "exact" : "WRONG",
              equivariant_ok ? "bit-exact" : "DIFFER", rotation_ok ? "bit-exact" : "DIFFER")};
}

// --- 8 ---------------------------------------------------------------------

Outcome augmentation_contracts() {
  Rng rng(801);
  const auto pairs = testkit::synthetic_roads(802, 4, 96);
  AugmentConfig cfg;
  cfg.crop_size = 64;
  Rng a(803), b(803);
  const auto x = make_batch(pairs, &cfg, &a), y = make_batch(pairs, &cfg, &b);
  const bool batch_ok = same_bits(x.images.data(), y.images.data()) && same_bits(x.masks.data(), y.masks.data());

  Mask mask(96, 96);
  for (auto& v : mask.data) v = bernoulli(rng, 0.3) ? 1 : 0;
  const auto img = random_image(rng, 96, 96);
  int non_binary = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto [_, m] = apply_paired(img, mask, sample_params(rng, cfg, 96, 96));
    non_binary += static_cast<int>(std::count_if(m.data.begin(), m.data.end(), [](auto v) { return v > 1; }));
  }

  auto p = AugmentParams::identity(40);
  p.crop_x = 13, p.crop_y = 29;
  const auto [oi, om] = apply_paired(img, mask, p);
  bool slice_ok = oi.height == 40 && oi.width == 40;
  for (int yy = 0; yy < 40 && slice_ok; ++yy)
    for (int xx = 0; xx < 40; ++xx) {
      slice_ok = slice_ok && om.at(yy, xx) == mask.at(yy + 29, xx + 13);
      for (int c = 0; c < 3; ++c) slice_ok = slice_ok && oi.at(yy, xx, c) == img.at(yy + 29, xx + 13, c);
    }

  const AugmentConfig defaults;
  double smin = 1e9, smax = -1e9, amin = 1e9, amax = -1e9;
  for (int i = 0; i < 10000; ++i) {
    const auto q = sample_params(rng, defaults, 1024, 1024);
    smin = std::min(smin, q.scale), smax = std::max(smax, q.scale);
    amin = std::min(amin, q.angle_deg), amax = std::max(amax, q.angle_deg);
  }
  const double sw = 0.01 * (1.4 - 0.6), aw = 0.01 * 60.0;
  const bool ranges_ok = smin >= 0.6 && smin <= 0.6 + sw && smax <= 1.4 && smax >= 1.4 - sw && amin >= -30.0 &&
                         amin <= -30.0 + aw && amax <= 30.0 && amax >= 30.0 - aw;
  return {batch_ok && non_binary == 0 && slice_ok && ranges_ok,
          fmt("batch %s, %d non-binary mask pixels in 1000 draws, identity slice %s, scale [%.4f, %.4f], angle "
              "[%.3f, %.3f]",
              batch_ok ? "byte-exact" : "DIFFERS", non_binary, slice_ok ? "exact" : "WRONG", smin, smax, amin, amax)};
}

// --- 9 ---------------------------------------------------------------------

Outcome checkpoint_round_trip() {
  testkit::TempDir dir("accept_ckpt");
  Model<float> m(ModelConfig::reduced(), 901);
  Rng rng(902);
  std::vector<float> xv(2 * 3 * 64 * 64);
  for (auto& v : xv) v = static_cast<float>(uniform01(rng));
  m.forward(Tensor<float>::from_data({2, 3, 64, 64}, xv)); // move running statistics
  save_checkpoint(m, {42, 0.5, 901}, dir.path() / "m.rseg");
  const auto loaded = load_checkpoint(dir.path() / "m.rseg");
  const auto probe = Tensor<float>::from_data({1, 3, 64, 64}, std::vector<float>(xv.begin(), xv.begin() + 3 * 64 * 64));
  const bool forward_ok = same_bits(m.infer(probe).data(), loaded.model.infer(probe).data());

  const auto bytes = encode_checkpoint(m, {42, 0.5, 901});
  int truncations_rejected = 0, truncations = 0;
  for (std::size_t len : {std::size_t{0}, std::size_t{8}, std::size_t{11}, bytes.size() / 3, bytes.size() - 1}) {
    ++truncations;
    try {
      decode_checkpoint(std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(len)));
    } catch (const FormatError&) {
      ++truncations_rejected;
    }
  }
  auto bumped = bytes;
  bumped[4] = 7;
  bool version_rejected = false;
  std::string version_msg;
  try {
    decode_checkpoint(bumped);
  } catch (const VersionError& e) {
    version_rejected = true;
    version_msg = e.what();
  }
  return {forward_ok && truncations_rejected == truncations && version_rejected,
          fmt("eval forward %s; %d/%d truncations rejected; version: %s", forward_ok ? "bit-exact" : "DIFFERS",
              truncations_rejected, truncations, version_rejected ? version_msg.c_str() : "ACCEPTED")};
}

// --- 10 --------------------------------------------------------------------

Outcome divisibility() {
  Rng rng(1001);
  Model<float> model(ModelConfig::reduced(), 1002);
  const ModelPredictor net(model);
  PredictTrace big, small;
  const auto p1024 = predict_full(net, random_image(rng, 1024, 1024), &big);
  const auto img100 = random_image(rng, 100, 100);
  const auto p100 = predict_full(net, img100, &small);
  // the padded branch must be exactly "reflect-pad, run, crop"
  const auto direct = predict_full(net, reflect_pad(img100, 128, 128));
  bool crop_ok = true;
  for (int y = 0; y < 100; ++y)
    for (int x = 0; x < 100; ++x)
      crop_ok = crop_ok && p100.data[static_cast<std::size_t>(y) * 100 + x] ==
                               direct.data[static_cast<std::size_t>(y + 14) * 128 + x + 14];
  const bool ok = !big.padded && big.net_height == 1024 && p1024.height == 1024 && p1024.width == 1024 &&
                  small.padded && small.net_height == 128 && small.net_width == 128 && p100.height == 100 &&
                  p100.width == 100 && crop_ok;
  return {ok, fmt("1024: %s path, output %dx%d; 100: padded to %dx%d, output %dx%d, crop %s",
                  big.padded ? "PADDED" : "direct", p1024.height, p1024.width, small.net_height, small.net_width,
                  p100.height, p100.width, crop_ok ? "exact" : "WRONG")};
}

} // namespace

int main() {
  int failures = 0;
  auto report = [&](int id, const char* name, const std::function<Outcome()>& check) {
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("criterion %2d %-28s %s  %s\n", id, name, o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
  };

  report(1, "gradient-suite", gradient_suite);
  report(2, "end-to-end-gradient", end_to_end_gradient);
  report(3, "loss-oracles", loss_oracles);
  report(4, "metric-exactness", metric_exactness);

  testkit::TempDir dir("accept_overfit");
  OverfitRun first, second;
  bool ran = false;
  std::string run_error;
  try {
    first = overfit_run(dir.path() / "a");
    second = overfit_run(dir.path() / "b");
    ran = true;
  } catch (const std::exception& e) {
    run_error = e.what();
  }
  report(5, "synthetic-overfit", [&] { return ran ? overfit(first) : Outcome{false, "exception: " + run_error}; });
  report(6, "tta-contracts", tta_contracts);
  report(7, "determinism", [&] { return ran ? determinism(first, second) : Outcome{false, "exception: " + run_error}; });
  report(8, "augmentation-contracts", augmentation_contracts);
  report(9, "checkpoint-round-trip", checkpoint_round_trip);
  report(10, "divisibility", divisibility);

  std::printf("%d of 10 criteria passed\n", 10 - failures);
  return failures == 0 ? 0 : 1;
}
