#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>

#include "roadseg/ops.hpp"

namespace roadseg {

struct LossConfig {
  double alpha = 0.7;
  double bce_eps = 1e-7;
  double jaccard_eps = 1e-7;

  void validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must be in [0, 1], got " + std::to_string(alpha));
    if (!(bce_eps > 0.0 && bce_eps < 0.5)) throw ConfigError("bce_eps must be in (0, 0.5)");
    if (!(jaccard_eps > 0.0)) throw ConfigError("jaccard_eps must be positive");
  }
};

namespace detail {

template <class T>
void check_mask_pair(std::string_view op, const Tensor<T>& prediction, const Tensor<T>& target) {
  require_same_shape(op, prediction.shape(), target.shape());
  for (T y : target.data())
    if (y != T{0} && y != T{1}) throw ContractError(std::string(op) + ": target values must be 0 or 1");
}

} // namespace detail

/// Mean per-pixel soft Jaccard index
///   J = (1/n) sum_i (y_i p_i + eps) / (y_i + p_i - y_i p_i + eps).
/// The eps in both numerator and denominator makes the background term
/// (y = p = 0) evaluate to 1.
template <class T>
Tensor<T> soft_jaccard(const Tensor<T>& prediction, const Tensor<T>& target, double eps = 1e-7) {
  detail::check_mask_pair("soft_jaccard", prediction, target);
  const T e = static_cast<T>(eps);
  const auto p = prediction.data();
  const auto y = target.data();
  T sum{0};
  for (std::size_t i = 0; i < p.size(); ++i) sum += (y[i] * p[i] + e) / (y[i] + p[i] - y[i] * p[i] + e);
  const T inv_n = T{1} / static_cast<T>(p.size());
  auto pi = prediction.impl();
  auto yi = target.impl();
  return detail::make_result<T>("soft_jaccard", {1}, {sum * inv_n}, {prediction},
                                [pi, yi, e, inv_n](const TensorImpl<T>& res) {
                                  auto* g = detail::grad_slot(pi);
                                  if (!g) return;
                                  const T up = res.grad[0] * inv_n;
                                  for (std::size_t i = 0; i < g->size(); ++i) {
                                    const T yv = yi->data[i], pv = pi->data[i];
                                    const T num = yv * pv + e;
                                    const T den = yv + pv - yv * pv + e;
                                    (*g)[i] += up * (yv * den - num * (T{1} - yv)) / (den * den);
                                  }
                                });
}

/// Mean binary cross-entropy with predictions clamped to [eps, 1 - eps].
template <class T>
Tensor<T> bce(const Tensor<T>& prediction, const Tensor<T>& target, double eps = 1e-7) {
  detail::check_mask_pair("bce", prediction, target);
  const T lo = static_cast<T>(eps), hi = static_cast<T>(1.0 - eps);
  const auto p = prediction.data();
  const auto y = target.data();
  T sum{0};
  for (std::size_t i = 0; i < p.size(); ++i) {
    const T c = std::clamp(p[i], lo, hi);
    sum -= y[i] * std::log(c) + (T{1} - y[i]) * std::log(T{1} - c);
  }
  const T inv_n = T{1} / static_cast<T>(p.size());
  auto pi = prediction.impl();
  auto yi = target.impl();
  return detail::make_result<T>("bce", {1}, {sum * inv_n}, {prediction},
                                [pi, yi, lo, hi, inv_n](const TensorImpl<T>& res) {
                                  auto* g = detail::grad_slot(pi);
                                  if (!g) return;
                                  const T up = res.grad[0] * inv_n;
                                  for (std::size_t i = 0; i < g->size(); ++i) {
                                    const T pv = pi->data[i];
                                    if (pv < lo || pv > hi) continue; // clamped: flat
                                    const T yv = yi->data[i];
                                    (*g)[i] += up * (-yv / pv + (T{1} - yv) / (T{1} - pv));
                                  }
                                });
}

/// alpha * H + (1 - alpha) * (1 - J), built from recorded ops so the
/// gradient flows through both terms.
template <class T>
Tensor<T> combined_loss(const Tensor<T>& prediction, const Tensor<T>& target, const LossConfig& cfg = {}) {
  cfg.validate();
  auto h = bce(prediction, target, cfg.bce_eps);
  auto j = soft_jaccard(prediction, target, cfg.jaccard_eps);
  auto one_minus_j = add_scalar(scale_mul(j, -1.0), 1.0);
  return add(scale_mul(h, cfg.alpha), scale_mul(one_minus_j, 1.0 - cfg.alpha));
}

/// Exact IoU of two binary masks; 1.0 when both are empty.
inline double eval_iou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth) {
  if (pred.size() != truth.size())
    throw DimensionError("eval_iou: mask sizes differ (" + std::to_string(pred.size()) + " vs " +
                         std::to_string(truth.size()) + ")");
  std::uint64_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred[i] != 0, b = truth[i] != 0;
    inter += a && b;
    uni += a || b;
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

} // namespace roadseg
