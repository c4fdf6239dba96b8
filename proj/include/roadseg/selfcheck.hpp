#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "roadseg/gradcheck.hpp"
#include "roadseg/image.hpp"
#include "roadseg/loss.hpp"

namespace roadseg {

inline constexpr double kGradTolerance = 1e-4;
inline constexpr double kGradEps = 1e-3;

struct OracleReport {
  std::string name;
  double max_err = 0.0;
  double tolerance = 0.0;
  bool passed() const { return max_err <= tolerance; }
};

struct SelfCheckOptions {
  int instances = 5;
  std::uint64_t seed = 2024;
  std::string broken_op; // negative control: corrupt this op's backward
};

namespace detail {

inline Tensor<double> random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = uniform(rng, lo, hi);
  return Tensor<double>::from_data(std::move(shape), std::move(v));
}

// Values whose magnitude is at least `gap`, random sign.
inline Tensor<double> away_from_zero(Rng& rng, Shape shape, double gap) {
  auto t = random_tensor(rng, std::move(shape), gap, 1.0);
  for (auto& x : t.mutable_data())
    if (bernoulli(rng, 0.5)) x = -x;
  return t;
}

// Distinct values spaced `gap` apart in random order.
inline Tensor<double> tie_free(Rng& rng, Shape shape, double gap) {
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = (static_cast<double>(i) - n / 2.0) * gap;
  for (std::size_t i = n - 1; i > 0; --i)
    std::swap(v[i], v[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(i)))]);
  return Tensor<double>::from_data(std::move(shape), std::move(v));
}

inline Tensor<double> binary_tensor(Rng& rng, Shape shape) {
  auto t = random_tensor(rng, std::move(shape), 0.0, 1.0);
  for (auto& x : t.mutable_data()) x = x < 0.5 ? 0.0 : 1.0;
  return t;
}

inline int pick(Rng& rng, int lo, int hi) { return static_cast<int>(uniform_int(rng, lo, hi)); }

using Instance = std::function<GradCheckReport(Rng&, const std::function<Tensor<double>(Tensor<double>)>&)>;

struct GradEntry {
  std::string name;
  Instance run;
};

inline std::vector<GradEntry> gradient_registry() {
  using T = Tensor<double>;
  std::vector<GradEntry> r;
  r.push_back({"conv2d", [](Rng& rng, const auto& hook) {
                 const int k = pick(rng, 1, 3), stride = pick(rng, 1, 2), pad = pick(rng, 0, 1);
                 const int h = pick(rng, std::max(3, k), 6), w = pick(rng, std::max(3, k), 6);
                 auto x = random_tensor(rng, {pick(rng, 1, 2), pick(rng, 1, 3), h, w});
                 auto wt = random_tensor(rng, {pick(rng, 1, 3), x.dim(1), k, k});
                 auto b = random_tensor(rng, {wt.dim(0)});
                 return grad_check("conv2d", [&] { return hook(conv2d(x, wt, b, stride, pad)); }, {x, wt, b}, kGradEps);
               }});
  r.push_back({"conv_transpose2d", [](Rng& rng, const auto& hook) {
                 const int k = pick(rng, 1, 3), stride = pick(rng, 1, 2);
                 auto x = random_tensor(rng, {pick(rng, 1, 2), pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 4)});
                 auto wt = random_tensor(rng, {x.dim(1), pick(rng, 1, 3), k, k});
                 return grad_check("conv_transpose2d", [&] { return hook(conv_transpose2d(x, wt, stride)); }, {x, wt},
                                   kGradEps);
               }});
  r.push_back({"maxpool2d", [](Rng& rng, const auto& hook) {
                 const int k = pick(rng, 2, 3), stride = pick(rng, 1, 2), pad = pick(rng, 0, 1);
                 auto x = tie_free(rng, {pick(rng, 1, 2), pick(rng, 1, 2), pick(rng, 4, 6), pick(rng, 4, 6)},
                                   10 * kGradEps);
                 return grad_check("maxpool2d", [&] { return hook(maxpool2d(x, k, stride, pad)); }, {x}, kGradEps);
               }});
  r.push_back({"batchnorm2d", [](Rng& rng, const auto& hook) {
                 const bool train = bernoulli(rng, 0.5);
                 // batch statistics over >= 18 samples with unit-scale spread keep the
                 // third derivative, and so the central-difference error, small
                 auto x = random_tensor(rng, {pick(rng, 2, 3), pick(rng, 1, 3), pick(rng, 3, 4), pick(rng, 3, 4)}, -2.0, 2.0);
                 const auto c = x.dim(1);
                 auto g = random_tensor(rng, {c}, 0.5, 1.5), b = random_tensor(rng, {c});
                 auto rm = random_tensor(rng, {c}), rv = random_tensor(rng, {c}, 0.5, 2.0);
                 const auto mode = train ? Mode::train : Mode::eval;
                 return grad_check("batchnorm2d", [&] { return hook(batchnorm2d(x, g, b, rm, rv, mode)); }, {x, g, b},
                                   kGradEps);
               }});
  r.push_back({"relu", [](Rng& rng, const auto& hook) {
                 auto x = away_from_zero(rng, {pick(rng, 1, 2), 2, pick(rng, 2, 5), pick(rng, 2, 5)}, 10 * kGradEps);
                 return grad_check("relu", [&] { return hook(relu(x)); }, {x}, kGradEps);
               }});
  r.push_back({"sigmoid", [](Rng& rng, const auto& hook) {
                 auto x = random_tensor(rng, {1, 2, pick(rng, 2, 5), pick(rng, 2, 5)}, -4.0, 4.0);
                 return grad_check("sigmoid", [&] { return hook(sigmoid(x)); }, {x}, kGradEps);
               }});
  r.push_back({"add", [](Rng& rng, const auto& hook) {
                 Shape s{1, pick(rng, 1, 3), pick(rng, 2, 5), pick(rng, 2, 5)};
                 auto a = random_tensor(rng, s), b = random_tensor(rng, s);
                 return grad_check("add", [&] { return hook(add(a, b)); }, {a, b}, kGradEps);
               }});
  r.push_back({"mul", [](Rng& rng, const auto& hook) {
                 Shape s{1, pick(rng, 1, 3), pick(rng, 2, 5), pick(rng, 2, 5)};
                 auto a = random_tensor(rng, s), b = random_tensor(rng, s);
                 return grad_check("mul", [&] { return hook(mul(a, b)); }, {a, b}, kGradEps);
               }});
  r.push_back({"concat_channels", [](Rng& rng, const auto& hook) {
                 const int n = pick(rng, 1, 2), h = pick(rng, 1, 4), w = pick(rng, 1, 4);
                 auto a = random_tensor(rng, {n, pick(rng, 1, 3), h, w}), b = random_tensor(rng, {n, pick(rng, 1, 3), h, w});
                 return grad_check("concat_channels", [&] { return hook(concat_channels(a, b)); }, {a, b}, kGradEps);
               }});
  r.push_back({"slice_channels", [](Rng& rng, const auto& hook) {
                 auto x = random_tensor(rng, {pick(rng, 1, 2), pick(rng, 2, 5), pick(rng, 1, 4), pick(rng, 1, 4)});
                 const int begin = pick(rng, 0, static_cast<int>(x.dim(1)) - 1);
                 const int end = pick(rng, begin + 1, static_cast<int>(x.dim(1)));
                 return grad_check("slice_channels", [&] { return hook(slice_channels(x, begin, end)); }, {x}, kGradEps);
               }});
  r.push_back({"scale_mul", [](Rng& rng, const auto& hook) {
                 auto x = random_tensor(rng, {pick(rng, 1, 6)});
                 const double s = uniform(rng, -3.0, 3.0);
                 return grad_check("scale_mul", [&] { return hook(scale_mul(x, s)); }, {x}, kGradEps);
               }});
  r.push_back({"add_scalar", [](Rng& rng, const auto& hook) {
                 auto x = random_tensor(rng, {pick(rng, 1, 6)});
                 const double s = uniform(rng, -3.0, 3.0);
                 return grad_check("add_scalar", [&] { return hook(add_scalar(x, s)); }, {x}, kGradEps);
               }});
  r.push_back({"mean_all", [](Rng& rng, const auto& hook) {
                 auto x = random_tensor(rng, {pick(rng, 1, 3), pick(rng, 1, 6)});
                 return grad_check("mean_all", [&] { return hook(mean_all(x)); }, {x}, kGradEps);
               }});
  r.push_back({"sum_all", [](Rng& rng, const auto& hook) {
                 auto x = random_tensor(rng, {pick(rng, 1, 3), pick(rng, 1, 6)});
                 return grad_check("sum_all", [&] { return hook(sum_all(x)); }, {x}, kGradEps);
               }});
  r.push_back({"spatial_dropout", [](Rng& rng, const auto& hook) {
                 auto x = random_tensor(rng, {pick(rng, 1, 2), pick(rng, 2, 6), pick(rng, 1, 3), pick(rng, 1, 3)});
                 const auto mask_seed = rng();
                 return grad_check(
                     "spatial_dropout",
                     [&] {
                       Rng drop(mask_seed); // same channel mask on every evaluation
                       return hook(spatial_dropout(x, 0.3, Mode::train, drop));
                     },
                     {x}, kGradEps);
               }});
  auto loss_instance = [](const std::string& name, auto fn) {
    return GradEntry{name, [name, fn](Rng& rng, const auto& hook) {
                       Shape s{pick(rng, 1, 2), 1, pick(rng, 2, 4), pick(rng, 2, 4)};
                       // background pixels contribute eps/(p+eps) to the soft Jaccard term, whose
                       // central difference has relative truncation error h^2/p^2; p >= 0.2 keeps
                       // that at 2.5e-5 for h = 1e-3
                       auto p = random_tensor(rng, s, 0.2, 0.8);
                       auto y = binary_tensor(rng, s);
                       return grad_check(name, [&] { return hook(fn(p, y)); }, {p}, kGradEps);
                     }};
  };
  r.push_back(loss_instance("soft_jaccard", [](const T& p, const T& y) { return soft_jaccard(p, y); }));
  r.push_back(loss_instance("bce", [](const T& p, const T& y) { return bce(p, y); }));
  r.push_back(loss_instance("combined_loss", [](const T& p, const T& y) { return combined_loss(p, y); }));
  return r;
}

} // namespace detail

/// Names of the ops covered by the gradient suite, in report order.
inline std::vector<std::string> gradient_suite_ops() {
  std::vector<std::string> names;
  for (const auto& e : detail::gradient_registry()) names.push_back(e.name);
  return names;
}

/// Finite-difference check of every differentiable op on random small
/// instances; one report per op holding the worst instance.
inline std::vector<GradCheckReport> run_gradient_suite(const SelfCheckOptions& opt = {}) {
  std::vector<GradCheckReport> out;
  Rng rng(opt.seed);
  for (const auto& entry : detail::gradient_registry()) {
    const bool broken = entry.name == opt.broken_op;
    auto hook = [broken](Tensor<double> y) {
      if (broken && y.requires_grad() && !y.is_leaf()) corrupt_backward(y, 0.5);
      return y;
    };
    GradCheckReport agg{entry.name, 0.0, 0.0, 0};
    for (int i = 0; i < opt.instances; ++i) {
      const auto rep = entry.run(rng, hook);
      agg.max_rel_err = std::max(agg.max_rel_err, rep.max_rel_err);
      agg.max_abs_err = std::max(agg.max_abs_err, rep.max_abs_err);
      agg.num_params_checked += rep.num_params_checked;
    }
    out.push_back(agg);
  }
  return out;
}

namespace detail {

// Plain per-pixel loops, written independently of the tensor ops.
inline double scalar_jaccard(const std::vector<double>& y, const std::vector<double>& p, double eps) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += (y[i] * p[i] + eps) / (y[i] + p[i] - y[i] * p[i] + eps);
  return s / static_cast<double>(y.size());
}

inline double scalar_bce(const std::vector<double>& y, const std::vector<double>& p, double eps) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double c = std::min(std::max(p[i], eps), 1.0 - eps);
    s += y[i] == 1.0 ? -std::log(c) : -std::log(1.0 - c);
  }
  return s / static_cast<double>(y.size());
}

} // namespace detail

/// Loss and metric values against scalar-loop oracles and closed forms.
inline std::vector<OracleReport> run_oracle_suite(const SelfCheckOptions& opt = {}, int pairs = 100) {
  Rng rng(opt.seed + 1);
  OracleReport jac{"soft_jaccard_vs_scalar_loop", 0.0, 1e-6};
  OracleReport ce{"bce_vs_scalar_loop", 0.0, 1e-6};
  OracleReport comb{"combined_loss_vs_components", 0.0, 1e-6};
  for (int k = 0; k < pairs; ++k) {
    const int n = detail::pick(rng, 1, 64);
    std::vector<double> y(static_cast<std::size_t>(n)), p(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      y[static_cast<std::size_t>(i)] = bernoulli(rng, 0.5) ? 1.0 : 0.0;
      p[static_cast<std::size_t>(i)] = uniform01(rng);
    }
    const auto yt = Tensor<double>::from_data({n}, y), pt = Tensor<double>::from_data({n}, p);
    const double j_ref = detail::scalar_jaccard(y, p, 1e-7), h_ref = detail::scalar_bce(y, p, 1e-7);
    jac.max_err = std::max(jac.max_err, std::abs(soft_jaccard(pt, yt).item() - j_ref));
    ce.max_err = std::max(ce.max_err, std::abs(bce(pt, yt).item() - h_ref));
    comb.max_err = std::max(comb.max_err, std::abs(combined_loss(pt, yt).item() - (0.7 * h_ref + 0.3 * (1.0 - j_ref))));
  }

  auto one = [](double v) { return Tensor<double>::from_data({1}, {v}); };
  OracleReport j_half{"soft_jaccard_half_prediction", std::abs(soft_jaccard(one(0.5), one(1.0)).item() - 0.5), 1e-6};
  OracleReport h_half{"bce_half_prediction", std::abs(bce(one(0.5), one(1.0)).item() - std::log(2.0)), 1e-6};
  // y = 0, p = 1 - 1/e: H = 1 and J = eps / (p + eps) ~ 0, so L ~ 0.7 + 0.3
  const double p_anchor = 1.0 - std::exp(-1.0);
  OracleReport l_one{"combined_loss_anchor", std::abs(combined_loss(one(p_anchor), one(0.0)).item() - 1.0), 1e-6};

  OracleReport iou_hand{"eval_iou_hand_case", 0.0, 0.0};
  {
    Mask pred(2, 2), gt(2, 2);
    pred.at(0, 0) = pred.at(0, 1) = 1;
    gt.at(0, 1) = gt.at(1, 1) = 1;
    iou_hand.max_err = std::abs(eval_iou(pred, gt) - 1.0 / 3.0);
  }
  OracleReport iou_rand{"eval_iou_vs_set_count", 0.0, 0.0};
  for (int k = 0; k < pairs * 10; ++k) {
    const int h = detail::pick(rng, 1, 5), w = detail::pick(rng, 1, 5);
    const double density = k % 10 == 0 ? 0.0 : uniform01(rng);
    Mask a(h, w), b(h, w);
    for (auto& v : a.data) v = bernoulli(rng, density);
    for (auto& v : b.data) v = bernoulli(rng, density);
    std::vector<int> sa, sb, inter, uni;
    for (int i = 0; i < h * w; ++i) {
      if (a.data[static_cast<std::size_t>(i)]) sa.push_back(i);
      if (b.data[static_cast<std::size_t>(i)]) sb.push_back(i);
    }
    std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(inter));
    std::set_union(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(uni));
    const double ref = uni.empty() ? 1.0 : static_cast<double>(inter.size()) / static_cast<double>(uni.size());
    iou_rand.max_err = std::max(iou_rand.max_err, std::abs(eval_iou(a, b) - ref));
  }
  return {jac, ce, comb, j_half, h_half, l_one, iou_hand, iou_rand};
}

} // namespace roadseg
