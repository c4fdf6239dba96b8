#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "roadseg/checkpoint.hpp"
#include "roadseg/data.hpp"
#include "roadseg/infer.hpp"
#include "roadseg/loss.hpp"

namespace roadseg {

enum class EvalSet { holdout, train };

struct TrainConfig {
  double lr0 = 1e-4;
  double decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 8;
  std::int64_t max_iterations = 20000;
  std::int64_t eval_every = 50;
  int keep_best = 3;
  std::uint64_t seed = 0;
  LossConfig loss;
  AugmentConfig augment;
  bool augment_enabled = true;
  EvalSet eval_set = EvalSet::holdout;
  double eval_threshold = 0.5;
  int workers = 1;                        // prefetch threads; 0 loads inline
  std::filesystem::path checkpoint_dir;   // empty: keep no checkpoints

  void validate() const {
    if (!(lr0 > 0.0) || !(decay >= 0.0)) throw ConfigError("lr0 must be positive and decay non-negative");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("betas must be in [0, 1)");
    if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
    if (batch_size <= 0) throw ConfigError("batch_size must be positive");
    if (max_iterations < 0) throw ConfigError("max_iterations must be non-negative");
    if (eval_every <= 0) throw ConfigError("eval_every must be positive");
    if (max_iterations > 0 && eval_every > max_iterations)
      throw ConfigError("eval_every (" + std::to_string(eval_every) + ") exceeds max_iterations (" +
                        std::to_string(max_iterations) + ")");
    if (keep_best <= 0) throw ConfigError("keep_best must be positive");
    if (workers < 0) throw ConfigError("workers must be non-negative");
    if (!(eval_threshold > 0.0 && eval_threshold < 1.0)) throw ConfigError("eval threshold must be in (0, 1)");
    loss.validate();
    if (augment_enabled) augment.validate();
  }
};

/// Learning rate for zero-based iteration t: lr0 / (1 + decay * t).
inline double learning_rate(const TrainConfig& cfg, std::int64_t t) {
  return cfg.lr0 / (1.0 + cfg.decay * static_cast<double>(t));
}

struct AdamState {
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;
  std::int64_t step = 0;
};

/// One Adam update with bias correction, using the decayed rate for
/// iteration t. Moments are created on first use.
inline void adam_step(std::span<const NamedTensor<float>> params, AdamState& state, const TrainConfig& cfg,
                      std::int64_t t) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.tensor.numel(), 0.0f);
      state.v.emplace_back(p.tensor.numel(), 0.0f);
    }
  }
  if (state.m.size() != params.size()) throw ContractError("adam_step: optimizer state does not match parameters");
  for (const auto& p : params)
    if (!p.tensor.has_grad()) throw ContractError("adam_step: parameter '" + p.name + "' has no gradient");

  ++state.step;
  const double lr = learning_rate(cfg, t);
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto theta = params[k].tensor.mutable_data();
    const auto g = params[k].tensor.grad();
    auto& m = state.m[k];
    auto& v = state.v[k];
    if (m.size() != theta.size()) throw ContractError("adam_step: moment shape mismatch for '" + params[k].name + "'");
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double gi = g[i];
      const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      theta[i] = static_cast<float>(theta[i] - lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg.adam_eps));
    }
  }
}

struct EvalRecord {
  std::int64_t iteration;
  double iou;
};

struct RetainedCheckpoint {
  std::int64_t iteration;
  double iou;
  std::filesystem::path path;
};

struct TrainHistory {
  std::vector<double> losses;
  std::vector<EvalRecord> evals;
  double best_iou = -1.0;
  std::int64_t best_iteration = -1;
  std::vector<RetainedCheckpoint> retained; // best first
};

/// Mean IoU of binarized whole-image predictions over `ids`.
inline double evaluate_iou(const Model<float>& model, const Dataset& data, const std::vector<std::string>& ids,
                           double threshold = 0.5) {
  if (ids.empty()) throw ConfigError("evaluate_iou: no samples to evaluate");
  const ModelPredictor net(model);
  double sum = 0.0;
  for (const auto& id : ids) {
    const auto pair = data.load(id);
    sum += eval_iou(binarize(predict_full(net, pair.image), threshold), pair.mask);
  }
  return sum / static_cast<double>(ids.size());
}

namespace detail {

inline std::vector<std::size_t> epoch_permutation(std::uint64_t seed, std::int64_t epoch, std::size_t n) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(stream_seed(seed, 0x100000000ULL + static_cast<std::uint64_t>(epoch)));
  for (std::size_t i = n - 1; i > 0; --i)
    std::swap(order[i], order[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(i)))]);
  return order;
}

inline std::string format_line(const char* fmt, auto... args) {
  char buf[256];
  std::snprintf(buf, sizeof buf, fmt, args...);
  return buf;
}

} // namespace detail

/// Sample ids of the batch for zero-based iteration t: consecutive slices of
/// a per-epoch seeded permutation of the training ids.
inline std::vector<std::string> batch_ids(const DatasetSplit& split, const TrainConfig& cfg, std::int64_t t) {
  const auto n = static_cast<std::int64_t>(split.train_ids.size());
  std::vector<std::string> ids;
  std::int64_t cached_epoch = -1;
  std::vector<std::size_t> perm;
  for (std::int64_t j = 0; j < cfg.batch_size; ++j) {
    const auto pos = t * cfg.batch_size + j;
    const auto epoch = pos / n;
    if (epoch != cached_epoch) {
      perm = detail::epoch_permutation(cfg.seed, epoch, static_cast<std::size_t>(n));
      cached_epoch = epoch;
    }
    ids.push_back(split.train_ids[perm[static_cast<std::size_t>(pos % n)]]);
  }
  return ids;
}

/// Batch for iteration t. A pure function of (data, split, cfg, t), so the
/// schedule is identical however many workers produce it.
inline Batch training_batch(const Dataset& data, const DatasetSplit& split, const TrainConfig& cfg, std::int64_t t) {
  std::vector<SamplePair> pairs;
  for (const auto& id : batch_ids(split, cfg, t)) pairs.push_back(data.load(id));
  if (!cfg.augment_enabled) return make_batch(pairs);
  Rng rng(stream_seed(cfg.seed, static_cast<std::uint64_t>(t)));
  return make_batch(pairs, &cfg.augment, &rng);
}

/// Runs the optimization loop: augmented batches, combined loss, Adam with
/// decayed rate, periodic whole-image IoU evaluation and top-k checkpoints.
/// Log lines go to `log` when given.
inline TrainHistory train(Model<float>& model, const Dataset& data, const DatasetSplit& split, const TrainConfig& cfg,
                          std::ostream* log = nullptr) {
  cfg.validate();
  if (split.train_ids.empty()) throw ConfigError("train: split has no training samples");
  const auto& eval_ids = cfg.eval_set == EvalSet::holdout ? split.holdout_ids : split.train_ids;
  if (eval_ids.empty()) throw ConfigError("train: split has no holdout samples");
  if (!cfg.checkpoint_dir.empty()) std::filesystem::create_directories(cfg.checkpoint_dir);

  TrainHistory history;
  AdamState adam;

  auto evaluate = [&](std::int64_t iteration) {
    model.set_mode(Mode::eval);
    const double iou = evaluate_iou(model, data, eval_ids, cfg.eval_threshold);
    model.set_mode(Mode::train);
    history.evals.push_back({iteration, iou});
    if (iou > history.best_iou) {
      history.best_iou = iou;
      history.best_iteration = iteration;
    }
    if (!cfg.checkpoint_dir.empty()) {
      auto& kept = history.retained;
      if (static_cast<int>(kept.size()) < cfg.keep_best || iou > kept.back().iou) {
        const CheckpointMeta meta{static_cast<std::uint64_t>(iteration), history.best_iou, model.seed()};
        const auto path = cfg.checkpoint_dir / ("checkpoint_iter" + std::to_string(iteration) + ".rseg");
        save_checkpoint(model, meta, path);
        auto pos = std::find_if(kept.begin(), kept.end(), [&](const auto& r) { return iou > r.iou; });
        const bool is_best = pos == kept.begin();
        kept.insert(pos, {iteration, iou, path});
        if (static_cast<int>(kept.size()) > cfg.keep_best) {
          std::filesystem::remove(kept.back().path);
          kept.pop_back();
        }
        if (is_best) save_checkpoint(model, meta, cfg.checkpoint_dir / "best.rseg");
      }
    }
    if (log)
      *log << detail::format_line("eval iter=%lld iou=%.6f best=%.6f", static_cast<long long>(iteration), iou,
                                  history.best_iou)
           << '\n';
  };

  model.set_mode(Mode::train);
  evaluate(0);
  if (cfg.max_iterations == 0) return history;

  OrderedPrefetcher<Batch> batches([&](std::int64_t t) { return training_batch(data, split, cfg, t); },
                                   cfg.max_iterations, cfg.workers);
  for (std::int64_t t = 0; t < cfg.max_iterations; ++t) {
    const auto batch = batches.next();
    model.zero_grad();
    auto loss = combined_loss(model.forward(batch.images), batch.masks, cfg.loss);
    const double value = loss.item();
    backward(loss);
    if (!std::isfinite(value)) {
      double sq = 0.0;
      std::string worst;
      double worst_norm = -1.0;
      for (const auto& p : model.parameters()) {
        double s = 0.0;
        for (float g : p.tensor.grad()) s += static_cast<double>(g) * g;
        sq += s;
        if (!(s <= worst_norm)) worst_norm = s, worst = p.name;
      }
      throw TrainingAbort(detail::format_line("non-finite loss at iteration %lld: loss=%g grad_norm=%g", static_cast<long long>(t),
                                              value, std::sqrt(sq)) +
                          " (largest gradient in '" + worst + "')");
    }
    adam_step(model.parameters(), adam, cfg, t);
    history.losses.push_back(value);
    if (log)
      *log << detail::format_line("iter=%lld lr=%.9g loss=%.9g", static_cast<long long>(t), learning_rate(cfg, t), value)
           << '\n';
    if ((t + 1) % cfg.eval_every == 0 || t + 1 == cfg.max_iterations) evaluate(t + 1);
  }
  return history;
}

} // namespace roadseg
