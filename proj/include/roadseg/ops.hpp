#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include "roadseg/rng.hpp"
#include "roadseg/tensor.hpp"

namespace roadseg {

/// Every op that records a backward rule. The self-check suite must cover
/// each of these exactly once.
inline constexpr std::array<std::string_view, 18> differentiable_ops{
    "conv2d",  "conv_transpose2d", "maxpool2d",       "batchnorm2d",   "relu",     "sigmoid",
    "add",     "mul",              "concat_channels", "slice_channels", "scale_mul", "add_scalar",
    "mean_all", "sum_all",         "spatial_dropout", "soft_jaccard",  "bce",      "combined_loss"};

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

/// Geometry of one strided 2-D window sweep.
struct Window {
  std::int64_t channels, height, width;
  std::int64_t kernel_h, kernel_w, stride, pad;
  std::int64_t out_h, out_w;

  std::int64_t rows() const { return channels * kernel_h * kernel_w; }
  std::int64_t cols() const { return out_h * out_w; }
  bool trivial() const { return kernel_h == 1 && kernel_w == 1 && stride == 1 && pad == 0; }
};

// cols layout: [channels * kh * kw][out_h * out_w]
template <class T>
void im2col(const T* src, const Window& g, T* cols) {
  for (std::int64_t c = 0; c < g.channels; ++c) {
    const T* plane = src + c * g.height * g.width;
    for (std::int64_t ky = 0; ky < g.kernel_h; ++ky) {
      for (std::int64_t kx = 0; kx < g.kernel_w; ++kx) {
        T* row = cols + ((c * g.kernel_h + ky) * g.kernel_w + kx) * g.cols();
        for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad + ky;
          T* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= g.height) {
            std::fill(dst, dst + g.out_w, T{0});
            continue;
          }
          const T* line = plane + iy * g.width;
          for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
            const std::int64_t ix = ox * g.stride - g.pad + kx;
            dst[ox] = (ix >= 0 && ix < g.width) ? line[ix] : T{0};
          }
        }
      }
    }
  }
}

// Scatter-add inverse of im2col.
template <class T>
void col2im(const T* cols, const Window& g, T* dst) {
  for (std::int64_t c = 0; c < g.channels; ++c) {
    T* plane = dst + c * g.height * g.width;
    for (std::int64_t ky = 0; ky < g.kernel_h; ++ky) {
      for (std::int64_t kx = 0; kx < g.kernel_w; ++kx) {
        const T* row = cols + ((c * g.kernel_h + ky) * g.kernel_w + kx) * g.cols();
        for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.height) continue;
          T* line = plane + iy * g.width;
          const T* src = row + oy * g.out_w;
          for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
            const std::int64_t ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.width) line[ix] += src[ox];
          }
        }
      }
    }
  }
}

inline void require_rank(std::string_view op, std::string_view what, const Shape& s, std::size_t rank) {
  if (s.size() != rank)
    throw DimensionError(std::string(op) + ": " + std::string(what) + " must have rank " + std::to_string(rank) +
                         ", got " + shape_str(s));
}

inline void require_same_shape(std::string_view op, const Shape& a, const Shape& b) {
  if (a != b) throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

} // namespace detail

/// 2-D convolution, NCHW input, OIHW weight, zero padding.
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, std::int64_t stride,
                 std::int64_t padding) {
  detail::require_rank("conv2d", "input", input.shape(), 4);
  detail::require_rank("conv2d", "weight", weight.shape(), 4);
  if (stride <= 0) throw ConfigError("conv2d: stride must be positive, got " + std::to_string(stride));
  if (padding < 0) throw ConfigError("conv2d: padding must be non-negative, got " + std::to_string(padding));
  const auto n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const auto o = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(1) != c)
    throw DimensionError("conv2d: input has " + std::to_string(c) + " channels but weight " +
                         shape_str(weight.shape()) + " expects " + std::to_string(weight.dim(1)));
  if (h + 2 * padding < kh || w + 2 * padding < kw)
    throw DimensionError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                         " larger than padded input " + shape_str(input.shape()));
  if (bias.defined() && bias.shape() != Shape{o})
    throw DimensionError("conv2d: bias shape " + shape_str(bias.shape()) + " expected (" + std::to_string(o) + ")");

  const detail::Window g{c, h, w, kh, kw, stride, padding, (h + 2 * padding - kh) / stride + 1,
                         (w + 2 * padding - kw) / stride + 1};
  const auto in_plane = c * h * w;
  const auto out_plane = o * g.cols();
  Buffer<T> out(static_cast<std::size_t>(n * out_plane));
  Buffer<T> cols(g.trivial() ? 0 : static_cast<std::size_t>(g.rows() * g.cols()));
  detail::ConstMatMap<T> wmat(weight.data().data(), o, g.rows());
  for (std::int64_t b = 0; b < n; ++b) {
    const T* src = input.data().data() + b * in_plane;
    if (!g.trivial()) detail::im2col(src, g, cols.data());
    detail::ConstMatMap<T> cmat(g.trivial() ? src : cols.data(), g.rows(), g.cols());
    detail::MatMap<T> omat(out.data() + b * out_plane, o, g.cols());
    omat.noalias() = wmat * cmat;
    if (bias.defined())
      for (std::int64_t oc = 0; oc < o; ++oc) omat.row(oc).array() += bias.data()[oc];
  }

  auto in_impl = input.impl();
  auto w_impl = weight.impl();
  auto b_impl = bias.defined() ? bias.impl() : nullptr;
  return detail::make_result<T>(
      "conv2d", {n, o, g.out_h, g.out_w}, std::move(out), {input, weight, bias},
      [in_impl, w_impl, b_impl, g, n, o, in_plane, out_plane](const TensorImpl<T>& res) {
        auto* gx = detail::grad_slot(in_impl);
        auto* gw = detail::grad_slot(w_impl);
        auto* gb = detail::grad_slot(b_impl);
        Buffer<T> cols(g.trivial() ? 0 : static_cast<std::size_t>(g.rows() * g.cols()));
        Buffer<T> gcols(static_cast<std::size_t>(g.rows() * g.cols()));
        detail::ConstMatMap<T> wmat(w_impl->data.data(), o, g.rows());
        for (std::int64_t b = 0; b < n; ++b) {
          detail::ConstMatMap<T> gout(res.grad.data() + b * out_plane, o, g.cols());
          if (gw) {
            const T* src = in_impl->data.data() + b * in_plane;
            if (!g.trivial()) detail::im2col(src, g, cols.data());
            detail::ConstMatMap<T> cmat(g.trivial() ? src : cols.data(), g.rows(), g.cols());
            detail::MatMap<T>(gw->data(), o, g.rows()).noalias() += gout * cmat.transpose();
          }
          if (gx) {
            detail::MatMap<T> gc(gcols.data(), g.rows(), g.cols());
            gc.noalias() = wmat.transpose() * gout;
            if (g.trivial()) {
              T* dst = gx->data() + b * in_plane;
              for (std::int64_t i = 0; i < in_plane; ++i) dst[i] += gcols[static_cast<std::size_t>(i)];
            } else {
              detail::col2im(gcols.data(), g, gx->data() + b * in_plane);
            }
          }
          if (gb)
            for (std::int64_t oc = 0; oc < o; ++oc) (*gb)[static_cast<std::size_t>(oc)] += gout.row(oc).sum();
        }
      });
}

template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, std::int64_t stride, std::int64_t padding) {
  return conv2d(input, weight, Tensor<T>{}, stride, padding);
}

/// Transposed convolution without padding, weight layout (in, out, kh, kw).
/// Output side is (H - 1) * stride + kernel.
template <class T>
Tensor<T> conv_transpose2d(const Tensor<T>& input, const Tensor<T>& weight, std::int64_t stride) {
  detail::require_rank("conv_transpose2d", "input", input.shape(), 4);
  detail::require_rank("conv_transpose2d", "weight", weight.shape(), 4);
  if (stride <= 0) throw ConfigError("conv_transpose2d: stride must be positive, got " + std::to_string(stride));
  const auto n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (weight.dim(0) != c)
    throw DimensionError("conv_transpose2d: input has " + std::to_string(c) + " channels but weight " +
                         shape_str(weight.shape()) + " expects " + std::to_string(weight.dim(0)));
  const auto o = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
  const auto oh = (h - 1) * stride + kh, ow = (w - 1) * stride + kw;
  // The forward pass is the adjoint of a conv over the output grid.
  const detail::Window g{o, oh, ow, kh, kw, stride, 0, h, w};
  const auto in_plane = c * h * w;
  const auto out_plane = o * oh * ow;

  Buffer<T> out(static_cast<std::size_t>(n * out_plane), T{0});
  Buffer<T> cols(static_cast<std::size_t>(g.rows() * g.cols()));
  detail::ConstMatMap<T> wmat(weight.data().data(), c, g.rows());
  for (std::int64_t b = 0; b < n; ++b) {
    detail::ConstMatMap<T> xmat(input.data().data() + b * in_plane, c, g.cols());
    detail::MatMap<T>(cols.data(), g.rows(), g.cols()).noalias() = wmat.transpose() * xmat;
    detail::col2im(cols.data(), g, out.data() + b * out_plane);
  }

  auto in_impl = input.impl();
  auto w_impl = weight.impl();
  return detail::make_result<T>(
      "conv_transpose2d", {n, o, oh, ow}, std::move(out), {input, weight},
      [in_impl, w_impl, g, n, c, in_plane, out_plane](const TensorImpl<T>& res) {
        auto* gx = detail::grad_slot(in_impl);
        auto* gw = detail::grad_slot(w_impl);
        Buffer<T> gcols(static_cast<std::size_t>(g.rows() * g.cols()));
        detail::ConstMatMap<T> wmat(w_impl->data.data(), c, g.rows());
        for (std::int64_t b = 0; b < n; ++b) {
          detail::im2col(res.grad.data() + b * out_plane, g, gcols.data());
          detail::ConstMatMap<T> gc(gcols.data(), g.rows(), g.cols());
          if (gx) detail::MatMap<T>(gx->data() + b * in_plane, c, g.cols()).noalias() += wmat * gc;
          if (gw) {
            detail::ConstMatMap<T> xmat(in_impl->data.data() + b * in_plane, c, g.cols());
            detail::MatMap<T>(gw->data(), c, g.rows()).noalias() += xmat * gc.transpose();
          }
        }
      });
}

/// Max pooling. Padding cells never win; ties go to the first cell in
/// row-major window order.
template <class T>
Tensor<T> maxpool2d(const Tensor<T>& input, std::int64_t kernel, std::int64_t stride, std::int64_t padding = 0) {
  detail::require_rank("maxpool2d", "input", input.shape(), 4);
  if (kernel <= 0 || stride <= 0) throw ConfigError("maxpool2d: kernel and stride must be positive");
  if (padding < 0 || padding >= kernel) throw ConfigError("maxpool2d: padding must be in [0, kernel)");
  const auto n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (h + 2 * padding < kernel || w + 2 * padding < kernel)
    throw DimensionError("maxpool2d: kernel " + std::to_string(kernel) + " larger than input " +
                         shape_str(input.shape()));
  const auto oh = (h + 2 * padding - kernel) / stride + 1, ow = (w + 2 * padding - kernel) / stride + 1;
  Buffer<T> out(static_cast<std::size_t>(n * c * oh * ow));
  std::vector<std::int64_t> argmax(out.size());
  const T* src = input.data().data();
  for (std::int64_t p = 0; p < n * c; ++p) {
    const T* plane = src + p * h * w;
    for (std::int64_t oy = 0; oy < oh; ++oy) {
      for (std::int64_t ox = 0; ox < ow; ++ox) {
        T best = -std::numeric_limits<T>::infinity();
        std::int64_t best_idx = -1;
        for (std::int64_t ky = 0; ky < kernel; ++ky) {
          const auto iy = oy * stride - padding + ky;
          if (iy < 0 || iy >= h) continue;
          for (std::int64_t kx = 0; kx < kernel; ++kx) {
            const auto ix = ox * stride - padding + kx;
            if (ix < 0 || ix >= w) continue;
            const T v = plane[iy * w + ix];
            if (best_idx < 0 || v > best) {
              best = v;
              best_idx = iy * w + ix;
            }
          }
        }
        const auto o = static_cast<std::size_t>((p * oh + oy) * ow + ox);
        out[o] = best;
        argmax[o] = p * h * w + best_idx;
      }
    }
  }
  auto in_impl = input.impl();
  return detail::make_result<T>("maxpool2d", {n, c, oh, ow}, std::move(out), {input},
                                [in_impl, argmax = std::move(argmax)](const TensorImpl<T>& res) {
                                  auto* gx = detail::grad_slot(in_impl);
                                  if (!gx) return;
                                  for (std::size_t i = 0; i < argmax.size(); ++i)
                                    (*gx)[static_cast<std::size_t>(argmax[i])] += res.grad[i];
                                });
}

enum class Mode { train, eval };

struct BatchNormOptions {
  double eps = 1e-5;
  double momentum = 0.1;
};

/// Per-channel batch normalization. In train mode batch statistics
/// (biased variance) normalize the input and are folded into the running
/// buffers; in eval mode the running buffers are used.
template <class T>
Tensor<T> batchnorm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                      const Tensor<T>& running_mean, const Tensor<T>& running_var, Mode mode,
                      BatchNormOptions opt = {}) {
  detail::require_rank("batchnorm2d", "input", input.shape(), 4);
  const auto n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  for (const auto* t : {&gamma, &beta, &running_mean, &running_var})
    if (t->shape() != Shape{c})
      throw DimensionError("batchnorm2d: per-channel tensor " + shape_str(t->shape()) + " does not match " +
                           std::to_string(c) + " channels");
  const auto count = static_cast<double>(n * hw);
  Buffer<T> mean(static_cast<std::size_t>(c)), invstd(static_cast<std::size_t>(c));
  const T* x = input.data().data();
  for (std::int64_t ch = 0; ch < c; ++ch) {
    const auto ci = static_cast<std::size_t>(ch);
    if (mode == Mode::train) {
      double s = 0.0;
      for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t i = 0; i < hw; ++i) s += x[(b * c + ch) * hw + i];
      const double m = s / count;
      double v = 0.0;
      for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t i = 0; i < hw; ++i) {
          const double d = x[(b * c + ch) * hw + i] - m;
          v += d * d;
        }
      v /= count;
      mean[ci] = static_cast<T>(m);
      invstd[ci] = static_cast<T>(1.0 / std::sqrt(v + opt.eps));
      auto rm = running_mean.mutable_data();
      auto rv = running_var.mutable_data();
      rm[ci] = static_cast<T>((1.0 - opt.momentum) * rm[ci] + opt.momentum * m);
      rv[ci] = static_cast<T>((1.0 - opt.momentum) * rv[ci] + opt.momentum * v);
    } else {
      mean[ci] = running_mean.data()[ci];
      invstd[ci] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var.data()[ci]) + opt.eps));
    }
  }
  Buffer<T> out(input.numel());
  Buffer<T> xhat(input.numel());
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const auto ci = static_cast<std::size_t>(ch);
      const T g = gamma.data()[ci], be = beta.data()[ci];
      for (std::int64_t i = 0; i < hw; ++i) {
        const auto k = static_cast<std::size_t>((b * c + ch) * hw + i);
        xhat[k] = (x[k] - mean[ci]) * invstd[ci];
        out[k] = g * xhat[k] + be;
      }
    }

  auto in_impl = input.impl();
  auto g_impl = gamma.impl();
  auto b_impl = beta.impl();
  const bool batch_stats = mode == Mode::train;
  return detail::make_result<T>(
      "batchnorm2d", input.shape(), std::move(out), {input, gamma, beta},
      [in_impl, g_impl, b_impl, xhat = std::move(xhat), invstd = std::move(invstd), n, c, hw, count,
       batch_stats](const TensorImpl<T>& res) {
        auto* gx = detail::grad_slot(in_impl);
        auto* gg = detail::grad_slot(g_impl);
        auto* gb = detail::grad_slot(b_impl);
        const auto& gy = res.grad;
        for (std::int64_t ch = 0; ch < c; ++ch) {
          const auto ci = static_cast<std::size_t>(ch);
          T sum_gy{0}, sum_gy_xhat{0};
          for (std::int64_t b = 0; b < n; ++b)
            for (std::int64_t i = 0; i < hw; ++i) {
              const auto k = static_cast<std::size_t>((b * c + ch) * hw + i);
              sum_gy += gy[k];
              sum_gy_xhat += gy[k] * xhat[k];
            }
          if (gg) (*gg)[ci] += sum_gy_xhat;
          if (gb) (*gb)[ci] += sum_gy;
          if (!gx) continue;
          const T scale = g_impl->data[ci] * invstd[ci];
          const T inv_count = static_cast<T>(1.0 / count);
          for (std::int64_t b = 0; b < n; ++b)
            for (std::int64_t i = 0; i < hw; ++i) {
              const auto k = static_cast<std::size_t>((b * c + ch) * hw + i);
              if (batch_stats)
                (*gx)[k] += scale * (gy[k] - inv_count * sum_gy - xhat[k] * inv_count * sum_gy_xhat);
              else
                (*gx)[k] += scale * gy[k];
            }
        }
      });
}

namespace detail {

template <class T, class Fwd, class Deriv>
Tensor<T> unary(std::string op, const Tensor<T>& input, Fwd fwd, Deriv deriv) {
  Buffer<T> out(input.numel());
  const auto x = input.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i]);
  auto in_impl = input.impl();
  return make_result<T>(std::move(op), input.shape(), std::move(out), {input},
                        [in_impl, deriv](const TensorImpl<T>& res) {
                          auto* gx = grad_slot(in_impl);
                          if (!gx) return;
                          for (std::size_t i = 0; i < gx->size(); ++i)
                            (*gx)[i] += res.grad[i] * deriv(in_impl->data[i], res.data[i]);
                        });
}

} // namespace detail

template <class T>
Tensor<T> relu(const Tensor<T>& input) {
  return detail::unary<T>(
      "relu", input, [](T v) { return v > T{0} ? v : T{0}; }, [](T x, T) { return x > T{0} ? T{1} : T{0}; });
}

/// Logistic sigmoid. Outputs are kept strictly inside (0, 1) even where the
/// floating-point result would saturate.
template <class T>
Tensor<T> sigmoid(const Tensor<T>& input) {
  return detail::unary<T>(
      "sigmoid", input,
      [](T v) {
        constexpr T lo = std::numeric_limits<T>::min();
        constexpr T hi = T{1} - std::numeric_limits<T>::epsilon() / 2;
        const T s = v >= T{0} ? T{1} / (T{1} + std::exp(-v)) : std::exp(v) / (T{1} + std::exp(v));
        return std::clamp(s, lo, hi);
      },
      [](T, T y) { return y * (T{1} - y); });
}

template <class T>
Tensor<T> scale_mul(const Tensor<T>& input, double s) {
  const T k = static_cast<T>(s);
  return detail::unary<T>("scale_mul", input, [k](T v) { return v * k; }, [k](T, T) { return k; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& input, double s) {
  const T k = static_cast<T>(s);
  return detail::unary<T>("add_scalar", input, [k](T v) { return v + k; }, [](T, T) { return T{1}; });
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("add", a.shape(), b.shape());
  Buffer<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  auto ai = a.impl();
  auto bi = b.impl();
  return detail::make_result<T>("add", a.shape(), std::move(out), {a, b}, [ai, bi](const TensorImpl<T>& res) {
    for (const auto& in : {ai, bi})
      if (auto* g = detail::grad_slot(in))
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += res.grad[i];
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("mul", a.shape(), b.shape());
  Buffer<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  auto ai = a.impl();
  auto bi = b.impl();
  return detail::make_result<T>("mul", a.shape(), std::move(out), {a, b}, [ai, bi](const TensorImpl<T>& res) {
    if (auto* g = detail::grad_slot(ai))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += res.grad[i] * bi->data[i];
    if (auto* g = detail::grad_slot(bi))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += res.grad[i] * ai->data[i];
  });
}

/// Stacks two NCHW tensors along the channel axis.
template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank("concat_channels", "first input", a.shape(), 4);
  detail::require_rank("concat_channels", "second input", b.shape(), 4);
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
    throw DimensionError("concat_channels: N,H,W must match, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  const auto n = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
  Buffer<T> out(static_cast<std::size_t>(n * (ca + cb) * hw));
  for (std::int64_t i = 0; i < n; ++i) {
    std::copy_n(a.data().data() + i * ca * hw, ca * hw, out.data() + i * (ca + cb) * hw);
    std::copy_n(b.data().data() + i * cb * hw, cb * hw, out.data() + i * (ca + cb) * hw + ca * hw);
  }
  auto ai = a.impl();
  auto bi = b.impl();
  return detail::make_result<T>("concat_channels", {n, ca + cb, a.dim(2), a.dim(3)}, std::move(out), {a, b},
                                [ai, bi, n, ca, cb, hw](const TensorImpl<T>& res) {
                                  auto* ga = detail::grad_slot(ai);
                                  auto* gb = detail::grad_slot(bi);
                                  for (std::int64_t i = 0; i < n; ++i) {
                                    const T* src = res.grad.data() + i * (ca + cb) * hw;
                                    if (ga)
                                      for (std::int64_t k = 0; k < ca * hw; ++k)
                                        (*ga)[static_cast<std::size_t>(i * ca * hw + k)] += src[k];
                                    if (gb)
                                      for (std::int64_t k = 0; k < cb * hw; ++k)
                                        (*gb)[static_cast<std::size_t>(i * cb * hw + k)] += src[ca * hw + k];
                                  }
                                });
}

/// Channels [begin, end) of an NCHW tensor.
template <class T>
Tensor<T> slice_channels(const Tensor<T>& input, std::int64_t begin, std::int64_t end) {
  detail::require_rank("slice_channels", "input", input.shape(), 4);
  const auto n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  if (begin < 0 || end > c || begin >= end)
    throw DimensionError("slice_channels: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") invalid for " + std::to_string(c) + " channels");
  const auto k = end - begin;
  Buffer<T> out(static_cast<std::size_t>(n * k * hw));
  for (std::int64_t i = 0; i < n; ++i)
    std::copy_n(input.data().data() + (i * c + begin) * hw, k * hw, out.data() + i * k * hw);
  auto in_impl = input.impl();
  return detail::make_result<T>("slice_channels", {n, k, input.dim(2), input.dim(3)}, std::move(out), {input},
                                [in_impl, n, c, hw, begin, k](const TensorImpl<T>& res) {
                                  auto* g = detail::grad_slot(in_impl);
                                  if (!g) return;
                                  for (std::int64_t i = 0; i < n; ++i)
                                    for (std::int64_t j = 0; j < k * hw; ++j)
                                      (*g)[static_cast<std::size_t>((i * c + begin) * hw + j)] +=
                                          res.grad[static_cast<std::size_t>(i * k * hw + j)];
                                });
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& input) {
  T s{0};
  for (T v : input.data()) s += v;
  auto in_impl = input.impl();
  return detail::make_result<T>("sum_all", {1}, {s}, {input}, [in_impl](const TensorImpl<T>& res) {
    if (auto* g = detail::grad_slot(in_impl))
      for (auto& v : *g) v += res.grad[0];
  });
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& input) {
  T s{0};
  for (T v : input.data()) s += v;
  const T inv = T{1} / static_cast<T>(input.numel());
  auto in_impl = input.impl();
  return detail::make_result<T>("mean_all", {1}, {s * inv}, {input}, [in_impl, inv](const TensorImpl<T>& res) {
    if (auto* g = detail::grad_slot(in_impl))
      for (auto& v : *g) v += res.grad[0] * inv;
  });
}

/// Channel dropout: in train mode each (n, c) plane is zeroed with
/// probability p and survivors are scaled by 1 / (1 - p). Identity in eval
/// mode or when p == 0.
template <class T>
Tensor<T> spatial_dropout(const Tensor<T>& input, double p, Mode mode, Rng& rng) {
  detail::require_rank("spatial_dropout", "input", input.shape(), 4);
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("spatial_dropout: p must be in [0, 1), got " + std::to_string(p));
  if (mode == Mode::eval || p == 0.0) return input;
  const auto planes = input.dim(0) * input.dim(1), hw = input.dim(2) * input.dim(3);
  Buffer<T> keep(static_cast<std::size_t>(planes));
  const T scale = static_cast<T>(1.0 / (1.0 - p));
  for (auto& k : keep) k = bernoulli(rng, p) ? T{0} : scale;
  Buffer<T> out(input.numel());
  for (std::int64_t pl = 0; pl < planes; ++pl)
    for (std::int64_t i = 0; i < hw; ++i) {
      const auto idx = static_cast<std::size_t>(pl * hw + i);
      out[idx] = input.data()[idx] * keep[static_cast<std::size_t>(pl)];
    }
  auto in_impl = input.impl();
  return detail::make_result<T>("spatial_dropout", input.shape(), std::move(out), {input},
                                [in_impl, keep = std::move(keep), hw](const TensorImpl<T>& res) {
                                  auto* g = detail::grad_slot(in_impl);
                                  if (!g) return;
                                  for (std::size_t i = 0; i < g->size(); ++i)
                                    (*g)[i] += res.grad[i] * keep[i / static_cast<std::size_t>(hw)];
                                });
}

/// Same values in another precision, detached from any graph.
template <class U, class T>
Tensor<U> cast(const Tensor<T>& t, bool requires_grad = false) {
  Buffer<U> data(t.numel());
  std::transform(t.data().begin(), t.data().end(), data.begin(), [](T v) { return static_cast<U>(v); });
  return Tensor<U>::adopt(t.shape(), std::move(data), requires_grad);
}

} // namespace roadseg
