#pragma once

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "roadseg/errors.hpp"
#include "roadseg/loss.hpp"

namespace roadseg {

/// 8-bit interleaved image, HWC.
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(int h, int w, int c, std::uint8_t fill = 0)
      : height(h), width(w), channels(c), pixels(static_cast<std::size_t>(h) * w * c, fill) {}

  std::uint8_t& at(int y, int x, int c) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  std::uint8_t at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  bool operator==(const Image&) const = default;
};

/// Binary mask, values in {0, 1}.
struct Mask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;

  Mask() = default;
  Mask(int h, int w, std::uint8_t fill = 0) : height(h), width(w), data(static_cast<std::size_t>(h) * w, fill) {}

  std::uint8_t& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
  bool operator==(const Mask&) const = default;
};

inline double eval_iou(const Mask& pred, const Mask& truth) {
  if (pred.height != truth.height || pred.width != truth.width)
    throw DimensionError("eval_iou: mask shapes differ (" + std::to_string(pred.height) + "x" +
                         std::to_string(pred.width) + " vs " + std::to_string(truth.height) + "x" +
                         std::to_string(truth.width) + ")");
  return eval_iou(std::span<const std::uint8_t>(pred.data), std::span<const std::uint8_t>(truth.data));
}

namespace detail {

inline std::string lower_ext(const std::filesystem::path& p) {
  auto e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
  return e;
}

inline Image read_png(const std::filesystem::path& path) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "rb"), &std::fclose);
  if (!fp) throw IoError("cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("libpng initialisation failed for " + path.string());
  }
  Image img;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("cannot decode PNG " + path.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  const auto color = png_get_color_type(png, info);
  const auto depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_read_update_info(png, info);
  const int channels = png_get_channels(png, info);
  img = Image(static_cast<int>(png_get_image_height(png, info)), static_cast<int>(png_get_image_width(png, info)),
              channels);
  rows.resize(static_cast<std::size_t>(img.height));
  for (int y = 0; y < img.height; ++y)
    rows[static_cast<std::size_t>(y)] = img.pixels.data() + static_cast<std::size_t>(y) * img.width * channels;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  // drop alpha
  if (img.channels == 2 || img.channels == 4) {
    const int keep = img.channels - 1;
    Image out(img.height, img.width, keep);
    for (std::size_t i = 0; i < static_cast<std::size_t>(img.height) * img.width; ++i)
      for (int c = 0; c < keep; ++c) out.pixels[i * keep + c] = img.pixels[i * img.channels + c];
    return out;
  }
  return img;
}

inline void write_png(const std::filesystem::path& path, const Image& img) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!fp) throw IoError("cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng initialisation failed for " + path.string());
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("failed writing PNG " + path.string());
  }
  png_init_io(png, fp.get());
  const int color = img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB;
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8, color,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < img.height; ++y)
    png_write_row(png, img.pixels.data() + static_cast<std::size_t>(y) * img.width * img.channels);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline Image read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  auto token = [&]() {
    std::string t;
    char ch;
    while (in.get(ch)) {
      if (ch == '#') {
        std::string skip;
        std::getline(in, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(ch))) {
        if (!t.empty()) break;
        continue;
      }
      t.push_back(ch);
    }
    return t;
  };
  const auto magic = token();
  if (magic != "P5" && magic != "P6") throw FormatError("unsupported PNM variant in " + path.string());
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(token());
    h = std::stoi(token());
    maxval = std::stoi(token());
  } catch (const std::exception&) {
    throw FormatError("malformed PNM header in " + path.string());
  }
  if (w <= 0 || h <= 0 || maxval != 255) throw FormatError("unsupported PNM geometry/maxval in " + path.string());
  Image img(h, w, magic == "P6" ? 3 : 1);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size()))
    throw FormatError("truncated PNM data in " + path.string());
  return img;
}

inline void write_pnm(const std::filesystem::path& path, const Image& img) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << (img.channels == 1 ? "P5" : "P6") << '\n' << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

} // namespace detail

inline bool is_supported_image(const std::filesystem::path& p) {
  const auto e = detail::lower_ext(p);
  return e == ".png" || e == ".ppm" || e == ".pgm" || e == ".pnm";
}

/// Decodes PNG (gray, gray+alpha, RGB, RGBA, palette) or binary PPM/PGM.
/// Alpha is dropped.
inline Image read_image(const std::filesystem::path& path) {
  const auto e = detail::lower_ext(path);
  if (e == ".png") return detail::read_png(path);
  if (e == ".ppm" || e == ".pgm" || e == ".pnm") return detail::read_pnm(path);
  throw FormatError("unsupported image format: " + path.string());
}

/// Writes 1- or 3-channel images; the format follows the extension.
inline void write_image(const std::filesystem::path& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3)
    throw ContractError("write_image: only 1 or 3 channels supported, got " + std::to_string(img.channels));
  const auto e = detail::lower_ext(path);
  if (e == ".png") return detail::write_png(path, img);
  if (e == ".ppm" || e == ".pgm" || e == ".pnm") {
    if ((e == ".pgm") != (img.channels == 1))
      throw ContractError("write_image: " + e + " does not match " + std::to_string(img.channels) + " channels");
    return detail::write_pnm(path, img);
  }
  throw IoError("unsupported output format: " + path.string());
}

/// Gray level per pixel; multi-channel inputs are averaged.
inline Image to_gray(const Image& img) {
  if (img.channels == 1) return img;
  Image out(img.height, img.width, 1);
  for (std::size_t i = 0; i < out.pixels.size(); ++i) {
    int sum = 0;
    for (int c = 0; c < img.channels; ++c) sum += img.pixels[i * img.channels + c];
    out.pixels[i] = static_cast<std::uint8_t>((sum + img.channels / 2) / img.channels);
  }
  return out;
}

inline Image to_rgb(const Image& img) {
  if (img.channels == 3) return img;
  if (img.channels != 1) throw FormatError("cannot convert " + std::to_string(img.channels) + "-channel image to RGB");
  Image out(img.height, img.width, 3);
  for (std::size_t i = 0; i < img.pixels.size(); ++i)
    for (int c = 0; c < 3; ++c) out.pixels[i * 3 + c] = img.pixels[i];
  return out;
}

/// 1 where gray >= threshold.
inline Mask binarize_gray(const Image& gray, std::uint8_t threshold = 128) {
  const auto g = to_gray(gray);
  Mask m(g.height, g.width);
  for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = g.pixels[i] >= threshold ? 1 : 0;
  return m;
}

} // namespace roadseg
