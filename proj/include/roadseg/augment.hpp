#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <utility>

#include "roadseg/image.hpp"
#include "roadseg/rng.hpp"

namespace roadseg {

/// Ranges of the on-the-fly training augmentation.
struct AugmentConfig {
  double scale_min = 0.6;
  double scale_max = 1.4;
  double rotation_deg = 30.0; // angle drawn from [-rotation_deg, +rotation_deg]
  int crop_size = 448;
  double brightness_delta = 0.2;
  double contrast_min = 0.8;
  double contrast_max = 1.2;
  double hue_delta_deg = 10.0;
  double saturation_min = 0.8;
  double saturation_max = 1.2;

  void validate() const {
    if (!(scale_min > 0.0 && scale_min <= scale_max)) throw ConfigError("scale range must be positive and ordered");
    if (crop_size <= 0) throw ConfigError("crop_size must be positive");
    if (rotation_deg < 0.0 || brightness_delta < 0.0 || hue_delta_deg < 0.0)
      throw ConfigError("rotation/brightness/hue deltas must be non-negative");
    if (!(contrast_min > 0.0 && contrast_min <= contrast_max)) throw ConfigError("contrast range invalid");
    if (!(saturation_min >= 0.0 && saturation_min <= saturation_max)) throw ConfigError("saturation range invalid");
  }
};

/// One concrete draw of the augmentation.
struct AugmentParams {
  double scale = 1.0;
  double angle_deg = 0.0;
  int crop_size = 0;
  int crop_x = 0;
  int crop_y = 0;
  double brightness = 0.0;
  double contrast = 1.0;
  double hue_deg = 0.0;
  double saturation = 1.0;

  /// Canvas of the scaled image, before rotation and cropping.
  static std::pair<int, int> scaled_size(int src_h, int src_w, double scale) {
    return {static_cast<int>(std::floor(src_h * scale)), static_cast<int>(std::floor(src_w * scale))};
  }

  static AugmentParams identity(int crop_size) {
    AugmentParams p;
    p.crop_size = crop_size;
    return p;
  }
};

/// Draws parameters so the crop window fits inside the scaled canvas.
/// Scales that leave the canvas smaller than the crop are redrawn.
inline AugmentParams sample_params(Rng& rng, const AugmentConfig& cfg, int src_h, int src_w) {
  cfg.validate();
  const auto [max_h, max_w] = AugmentParams::scaled_size(src_h, src_w, cfg.scale_max);
  if (max_h < cfg.crop_size || max_w < cfg.crop_size)
    throw ConfigError("source image " + std::to_string(src_h) + "x" + std::to_string(src_w) +
                      " too small for a " + std::to_string(cfg.crop_size) + " crop at any scale");
  AugmentParams p;
  p.crop_size = cfg.crop_size;
  int canvas_h = 0, canvas_w = 0;
  for (;;) {
    p.scale = uniform(rng, cfg.scale_min, cfg.scale_max);
    std::tie(canvas_h, canvas_w) = AugmentParams::scaled_size(src_h, src_w, p.scale);
    if (canvas_h >= cfg.crop_size && canvas_w >= cfg.crop_size) break;
  }
  p.angle_deg = uniform(rng, -cfg.rotation_deg, cfg.rotation_deg);
  p.crop_y = static_cast<int>(uniform_int(rng, 0, canvas_h - cfg.crop_size));
  p.crop_x = static_cast<int>(uniform_int(rng, 0, canvas_w - cfg.crop_size));
  p.brightness = uniform(rng, -cfg.brightness_delta, cfg.brightness_delta);
  p.contrast = uniform(rng, cfg.contrast_min, cfg.contrast_max);
  p.hue_deg = uniform(rng, -cfg.hue_delta_deg, cfg.hue_delta_deg);
  p.saturation = uniform(rng, cfg.saturation_min, cfg.saturation_max);
  return p;
}

namespace detail {

inline std::uint8_t quantize(double v01) {
  const double v = std::floor(std::clamp(v01, 0.0, 1.0) * 255.0 + 0.5);
  return static_cast<std::uint8_t>(v);
}

} // namespace detail

/// Scale, rotate about the canvas centre, and crop, in one inverse-mapping
/// pass. The image is sampled bilinearly and the mask by nearest neighbour;
/// coordinates outside the source are clamped to the border. Positive
/// angles rotate counter-clockwise as displayed.
inline std::pair<Image, Mask> apply_paired(const Image& image, const Mask& mask, const AugmentParams& p) {
  if (image.height != mask.height || image.width != mask.width)
    throw PairingError("apply_paired: image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                       " and mask " + std::to_string(mask.height) + "x" + std::to_string(mask.width) + " differ");
  const auto [canvas_h, canvas_w] = AugmentParams::scaled_size(image.height, image.width, p.scale);
  if (p.crop_size <= 0 || p.crop_x < 0 || p.crop_y < 0 || p.crop_x + p.crop_size > canvas_w ||
      p.crop_y + p.crop_size > canvas_h)
    throw ConfigError("apply_paired: crop window outside the scaled image");

  const int s = p.crop_size, ch = image.channels;
  Image out(s, s, ch);
  Mask out_mask(s, s);
  const double theta = p.angle_deg * std::numbers::pi / 180.0;
  const double cos_t = std::cos(theta), sin_t = std::sin(theta);
  const double cx = canvas_w / 2.0, cy = canvas_h / 2.0;
  const double inv_scale = 1.0 / p.scale;
  const int max_x = image.width - 1, max_y = image.height - 1;

  for (int oy = 0; oy < s; ++oy) {
    for (int ox = 0; ox < s; ++ox) {
      // output pixel centre on the rotated canvas
      const double dx = p.crop_x + ox + 0.5 - cx;
      const double dy = p.crop_y + oy + 0.5 - cy;
      // y grows downwards, so this inverse map undoes a visual CCW turn
      const double qx = cos_t * dx - sin_t * dy + cx;
      const double qy = sin_t * dx + cos_t * dy + cy;
      const double u = qx * inv_scale - 0.5;
      const double v = qy * inv_scale - 0.5;

      const double fx0 = std::floor(u), fy0 = std::floor(v);
      const double fx = u - fx0, fy = v - fy0;
      const int x0 = std::clamp(static_cast<int>(fx0), 0, max_x), x1 = std::clamp(static_cast<int>(fx0) + 1, 0, max_x);
      const int y0 = std::clamp(static_cast<int>(fy0), 0, max_y), y1 = std::clamp(static_cast<int>(fy0) + 1, 0, max_y);
      for (int c = 0; c < ch; ++c) {
        const double top = (1.0 - fx) * image.at(y0, x0, c) + fx * image.at(y0, x1, c);
        const double bottom = (1.0 - fx) * image.at(y1, x0, c) + fx * image.at(y1, x1, c);
        const double val = (1.0 - fy) * top + fy * bottom;
        out.at(oy, ox, c) = static_cast<std::uint8_t>(std::clamp(std::floor(val + 0.5), 0.0, 255.0));
      }
      const int nx = std::clamp(static_cast<int>(std::floor(u + 0.5)), 0, max_x);
      const int ny = std::clamp(static_cast<int>(std::floor(v + 0.5)), 0, max_y);
      out_mask.at(oy, ox) = mask.at(ny, nx);
    }
  }
  return {std::move(out), std::move(out_mask)};
}

/// HSV with h in degrees [0, 360), s and v in [0, 1].
inline std::array<double, 3> rgb_to_hsv(double r, double g, double b) {
  const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
  const double d = mx - mn;
  double h = 0.0;
  if (d > 0.0) {
    if (mx == r)
      h = 60.0 * std::fmod((g - b) / d, 6.0);
    else if (mx == g)
      h = 60.0 * ((b - r) / d + 2.0);
    else
      h = 60.0 * ((r - g) / d + 4.0);
  }
  if (h < 0.0) h += 360.0;
  return {h, mx > 0.0 ? d / mx : 0.0, mx};
}

inline std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h = std::fmod(h, 360.0);
  if (h < 0.0) h += 360.0;
  const double c = v * s;
  const double hp = h / 60.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(hp) % 6) {
  case 0: r = c, g = x; break;
  case 1: r = x, g = c; break;
  case 2: g = c, b = x; break;
  case 3: g = x, b = c; break;
  case 4: r = x, b = c; break;
  default: r = c, b = x; break;
  }
  const double m = v - c;
  return {r + m, g + m, b + m};
}

/// Photometric jitter on an RGB image: brightness shift, contrast about
/// mid-gray, then hue rotation and saturation scaling. Values are clamped to
/// [0, 1] after each stage and quantized with round-half-up. Stages at their
/// neutral value are skipped.
inline Image color_jitter(const Image& image, const AugmentParams& p) {
  if (image.channels != 3) throw DimensionError("color_jitter expects an RGB image");
  Image out = image;
  const bool hsv = p.hue_deg != 0.0 || p.saturation != 1.0;
  for (std::size_t i = 0; i < out.pixels.size(); i += 3) {
    std::array<double, 3> rgb{};
    for (int c = 0; c < 3; ++c) {
      double v = image.pixels[i + static_cast<std::size_t>(c)] / 255.0;
      if (p.brightness != 0.0) v = std::clamp(v + p.brightness, 0.0, 1.0);
      if (p.contrast != 1.0) v = std::clamp((v - 0.5) * p.contrast + 0.5, 0.0, 1.0);
      rgb[static_cast<std::size_t>(c)] = v;
    }
    if (hsv) {
      auto [h, s, v] = rgb_to_hsv(rgb[0], rgb[1], rgb[2]);
      rgb = hsv_to_rgb(h + p.hue_deg, std::clamp(s * p.saturation, 0.0, 1.0), v);
    }
    for (int c = 0; c < 3; ++c) out.pixels[i + static_cast<std::size_t>(c)] = detail::quantize(rgb[static_cast<std::size_t>(c)]);
  }
  return out;
}

} // namespace roadseg
