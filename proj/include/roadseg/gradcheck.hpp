#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "roadseg/ops.hpp"

namespace roadseg {

struct GradCheckReport {
  std::string op_name;
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  std::size_t num_params_checked = 0;
};

/// A single scalar to probe: element `index` of the `tensor`-th checked tensor.
struct GradProbe {
  std::size_t tensor;
  std::size_t index;
};

namespace detail {

// Non-scalar outputs are reduced with fixed pseudo-random weights so every
// output element contributes a distinct amount to the checked scalar.
inline Tensor<double> project_to_scalar(const Tensor<double>& out) {
  if (out.numel() == 1) return out;
  Rng rng(0x5eedULL);
  std::vector<double> w(out.numel());
  for (auto& v : w) v = uniform(rng, -1.0, 1.0);
  return sum_all(mul(out, Tensor<double>::from_data(out.shape(), std::move(w))));
}

} // namespace detail

/// Central-difference check of autograd on the 64-bit path.
///
/// `loss_fn` is re-run for every perturbation and must read the `wrt`
/// tensors by handle. Relative error uses max(|analytic|, |numeric|, 1e-8)
/// as denominator. With no probes every element of every tensor is checked.
template <class F>
GradCheckReport grad_check(std::string op_name, F&& loss_fn, const std::vector<Tensor<double>>& wrt,
                           double eps = 1e-3, std::span<const GradProbe> probes = {}) {
  if (!(eps > 0.0)) throw ConfigError("grad_check: eps must be positive");
  for (const auto& t : wrt) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  auto loss = detail::project_to_scalar(loss_fn());
  backward(loss);

  std::vector<std::vector<double>> analytic;
  for (const auto& t : wrt) {
    if (t.has_grad())
      analytic.emplace_back(t.grad().begin(), t.grad().end());
    else
      analytic.emplace_back(t.numel(), 0.0);
  }

  std::vector<GradProbe> all;
  if (probes.empty()) {
    for (std::size_t k = 0; k < wrt.size(); ++k)
      for (std::size_t i = 0; i < wrt[k].numel(); ++i) all.push_back({k, i});
    probes = all;
  }

  auto eval = [&] {
    NoGradGuard guard;
    return detail::project_to_scalar(loss_fn()).item();
  };

  GradCheckReport report{std::move(op_name), 0.0, 0.0, 0};
  for (const auto& probe : probes) {
    auto data = wrt.at(probe.tensor).mutable_data();
    const double saved = data[probe.index];
    data[probe.index] = saved + eps;
    const double up = eval();
    data[probe.index] = saved - eps;
    const double down = eval();
    data[probe.index] = saved;
    const double numeric = (up - down) / (2.0 * eps);
    const double a = analytic[probe.tensor][probe.index];
    const double abs_err = std::abs(a - numeric);
    const double rel_err = abs_err / std::max({std::abs(a), std::abs(numeric), 1e-8});
    report.max_abs_err = std::max(report.max_abs_err, abs_err);
    report.max_rel_err = std::max(report.max_rel_err, rel_err);
    ++report.num_params_checked;
  }
  for (const auto& t : wrt) t.zero_grad();
  return report;
}

/// Rewires the recorded backward of `t` so every input gradient contribution
/// is multiplied by `factor`. Used as a negative control for grad_check.
template <class T>
void corrupt_backward(const Tensor<T>& t, double factor) {
  auto node = t.impl()->node;
  if (!node) throw ContractError("corrupt_backward: tensor has no recorded op");
  auto original = std::move(node->backward);
  auto inputs = node->inputs;
  node->backward = [original = std::move(original), inputs, factor](const TensorImpl<T>& out) {
    std::vector<Buffer<T>> before;
    for (const auto& in : inputs) before.push_back(in && in->requires_grad ? in->ensure_grad() : Buffer<T>{});
    original(out);
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      if (!inputs[k] || !inputs[k]->requires_grad) continue;
      auto& g = inputs[k]->grad;
      for (std::size_t i = 0; i < g.size(); ++i)
        g[i] = before[k][i] + static_cast<T>(factor) * (g[i] - before[k][i]);
    }
  };
}

} // namespace roadseg
