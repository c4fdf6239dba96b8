#pragma once

#include <algorithm>
#include <array>
#include <concepts>
#include <cstdint>
#include <vector>

#include "roadseg/data.hpp"
#include "roadseg/model.hpp"

namespace roadseg {

struct TtaConfig {
  bool enabled = true;
  double threshold = 0.5;

  void validate() const {
    if (!(threshold > 0.0 && threshold < 1.0))
      throw ConfigError("binarize threshold must be in (0, 1), got " + std::to_string(threshold));
  }
};

struct Prediction {
  std::string source_id;
  ProbMap prob_map;
  Mask mask;
};

/// Anything that maps a 1 x C x H x W float tensor to 1 x K x H x W.
template <class Net>
concept Predictor = requires(const Net& net, const Tensor<float>& x) {
  { net(x) } -> std::convertible_to<Tensor<float>>;
};

/// Eval-mode, no-grad view of a model.
class ModelPredictor {
public:
  explicit ModelPredictor(const Model<float>& model) : model_(&model) {}
  Tensor<float> operator()(const Tensor<float>& x) const { return model_->infer(x); }

private:
  const Model<float>* model_;
};

namespace detail {

// Rotates interleaved H x W x C data by k quarter turns counter-clockwise.
template <class E>
std::vector<E> rotate_ccw(const std::vector<E>& src, int h, int w, int ch, int k) {
  k = ((k % 4) + 4) % 4;
  if (k == 0) return src;
  const int nh = (k % 2) ? w : h, nw = (k % 2) ? h : w;
  std::vector<E> dst(src.size());
  for (int r = 0; r < nh; ++r)
    for (int c = 0; c < nw; ++c) {
      int sr = 0, sc = 0;
      switch (k) {
      case 1: sr = c, sc = w - 1 - r; break;
      case 2: sr = h - 1 - r, sc = w - 1 - c; break;
      default: sr = h - 1 - c, sc = r; break;
      }
      const auto d = (static_cast<std::size_t>(r) * nw + c) * ch;
      const auto s = (static_cast<std::size_t>(sr) * w + sc) * ch;
      for (int q = 0; q < ch; ++q) dst[d + q] = src[s + q];
    }
  return dst;
}

// Mirror index into [0, n) without repeating the edge sample.
inline int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

inline int round_up(int v, int m) { return (v + m - 1) / m * m; }

} // namespace detail

inline Image rotate_ccw(const Image& img, int k) {
  Image out = img;
  out.pixels = detail::rotate_ccw(img.pixels, img.height, img.width, img.channels, k);
  if (((k % 4) + 4) % 2) std::swap(out.height, out.width);
  return out;
}

inline ProbMap rotate_ccw(const ProbMap& m, int k) {
  ProbMap out = m;
  out.data = detail::rotate_ccw(m.data, m.height, m.width, 1, k);
  if (((k % 4) + 4) % 2) std::swap(out.height, out.width);
  return out;
}

inline ProbMap rotate_cw(const ProbMap& m, int k) { return rotate_ccw(m, 4 - ((k % 4) + 4) % 4); }
inline Image rotate_cw(const Image& img, int k) { return rotate_ccw(img, 4 - ((k % 4) + 4) % 4); }

/// Reflect-pads to (out_h, out_w) with the extra rows/columns split between
/// both sides (the odd one at the bottom/right).
inline Image reflect_pad(const Image& img, int out_h, int out_w) {
  const int top = (out_h - img.height) / 2, left = (out_w - img.width) / 2;
  Image out(out_h, out_w, img.channels);
  for (int y = 0; y < out_h; ++y) {
    const int sy = detail::reflect_index(y - top, img.height);
    for (int x = 0; x < out_w; ++x) {
      const int sx = detail::reflect_index(x - left, img.width);
      for (int c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(sy, sx, c);
    }
  }
  return out;
}

/// Records which path predict_full took.
struct PredictTrace {
  bool padded = false;
  int net_height = 0;
  int net_width = 0;
};

/// Whole-image probability map. Sides already divisible by 32 go straight
/// through the network; others are reflect-padded up to the next multiple
/// and the result is cropped back.
template <Predictor Net>
ProbMap predict_full(const Net& net, const Image& image, PredictTrace* trace = nullptr) {
  const int ph = detail::round_up(image.height, static_cast<int>(kSideMultiple));
  const int pw = detail::round_up(image.width, static_cast<int>(kSideMultiple));
  const bool pad = ph != image.height || pw != image.width;
  const Tensor<float> out = net(image_to_tensor(pad ? reflect_pad(image, ph, pw) : image));
  if (trace) *trace = {pad, ph, pw};
  if (out.rank() != 4 || out.dim(0) != 1 || out.dim(2) != ph || out.dim(3) != pw)
    throw DimensionError("predictor returned " + shape_str(out.shape()) + " for a " + std::to_string(ph) + "x" +
                         std::to_string(pw) + " input");
  const int top = (ph - image.height) / 2, left = (pw - image.width) / 2;
  ProbMap m{image.height, image.width, std::vector<float>(static_cast<std::size_t>(image.height) * image.width)};
  const auto src = out.data();
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x)
      m.data[static_cast<std::size_t>(y) * image.width + x] = src[static_cast<std::size_t>(y + top) * pw + x + left];
  return m;
}

/// Mean of the four quarter-turn predictions, each turned back into the
/// input frame. Per pixel the four values are sorted before a pairwise sum,
/// so the result does not depend on which rotation produced which value.
template <Predictor Net>
ProbMap tta_predict(const Net& net, const Image& image, const TtaConfig& cfg = {}) {
  if (!cfg.enabled) return predict_full(net, image);
  std::array<ProbMap, 4> maps;
  for (int k = 0; k < 4; ++k) maps[static_cast<std::size_t>(k)] = rotate_cw(predict_full(net, rotate_ccw(image, k)), k);
  ProbMap out{image.height, image.width, std::vector<float>(maps[0].data.size())};
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    std::array<float, 4> v{maps[0].data[i], maps[1].data[i], maps[2].data[i], maps[3].data[i]};
    std::sort(v.begin(), v.end());
    out.data[i] = ((v[0] + v[1]) + (v[2] + v[3])) * 0.25f;
  }
  return out;
}

/// 1 where prob >= threshold.
inline Mask binarize(const ProbMap& prob, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0))
    throw ConfigError("binarize threshold must be in (0, 1), got " + std::to_string(threshold));
  Mask m(prob.height, prob.width);
  for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = prob.data[i] >= threshold ? 1 : 0;
  return m;
}

template <Predictor Net>
Prediction predict(const Net& net, const Image& image, const TtaConfig& cfg, std::string id = {}) {
  cfg.validate();
  Prediction p;
  p.source_id = std::move(id);
  p.prob_map = tta_predict(net, image, cfg);
  p.mask = binarize(p.prob_map, cfg.threshold);
  return p;
}

} // namespace roadseg
