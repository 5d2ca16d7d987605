#pragma once

// 8-bit PNG output through libpng, plus a small raster line plot.

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace mthu::image {

struct Image {
  int width = 0;
  int height = 0;
  int channels = 1;  // 1 gray, 3 RGB
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(int w, int h, int c, std::uint8_t fill = 0)
      : width(w), height(h), channels(c), pixels(static_cast<std::size_t>(w) * h * c, fill) {}
  std::uint8_t* at(int x, int y) { return &pixels[(static_cast<std::size_t>(y) * width + x) * channels]; }
};

inline std::uint8_t to_byte(double v) {
  if (!(v > 0.0)) return 0;
  if (v >= 1.0) return 255;
  return static_cast<std::uint8_t>(std::lround(v * 255.0));
}

inline void write_png(const std::filesystem::path& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw std::invalid_argument("write_png: 1 or 3 channels");
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!fp) throw std::runtime_error("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw std::runtime_error("libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng failed writing " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, img.width, img.height, 8, img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < img.height; ++y)
    png_write_row(png, const_cast<png_bytep>(&img.pixels[static_cast<std::size_t>(y) * img.width * img.channels]));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

// Reads an 8-bit gray or RGB PNG (used by tests).
inline Image read_png(const std::filesystem::path& path) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "rb"), &std::fclose);
  if (!fp) throw std::runtime_error("cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw std::runtime_error("libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("libpng failed reading " + path.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  const int type = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) != 8 || (type != PNG_COLOR_TYPE_GRAY && type != PNG_COLOR_TYPE_RGB)) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error(path.string() + ": only 8-bit gray/RGB supported");
  }
  Image img(png_get_image_width(png, info), png_get_image_height(png, info), type == PNG_COLOR_TYPE_GRAY ? 1 : 3);
  for (int y = 0; y < img.height; ++y) png_read_row(png, img.at(0, y), nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

// Line plot of several series on a white canvas with a gray frame.
// Series share the x axis (sample index) and an automatic y range.
inline Image line_plot(const std::vector<std::vector<double>>& series, int width = 480, int height = 320) {
  static const std::array<std::array<std::uint8_t, 3>, 6> palette{
      {{{200, 30, 30}}, {{30, 120, 200}}, {{40, 160, 60}}, {{200, 140, 20}}, {{130, 60, 170}}, {{20, 20, 20}}}};
  Image img(width, height, 3, 255);
  const int margin = 20;
  double lo = 0.0, hi = 0.0;
  bool first = true;
  for (const auto& s : series)
    for (double v : s) {
      if (!std::isfinite(v)) continue;
      lo = first ? v : std::min(lo, v);
      hi = first ? v : std::max(hi, v);
      first = false;
    }
  if (hi <= lo) hi = lo + 1.0;
  for (int x = margin; x < width - margin; ++x) {
    std::fill_n(img.at(x, margin), 3, 160);
    std::fill_n(img.at(x, height - margin - 1), 3, 160);
  }
  for (int y = margin; y < height - margin; ++y) {
    std::fill_n(img.at(margin, y), 3, 160);
    std::fill_n(img.at(width - margin - 1, y), 3, 160);
  }
  const double pw = width - 2.0 * margin - 1, ph = height - 2.0 * margin - 1;
  auto plot = [&](double fx, double fy, const std::array<std::uint8_t, 3>& c) {
    const int x = margin + static_cast<int>(std::lround(fx * pw));
    const int y = height - margin - 1 - static_cast<int>(std::lround(fy * ph));
    std::copy(c.begin(), c.end(), img.at(std::clamp(x, 0, width - 1), std::clamp(y, 0, height - 1)));
  };
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const auto& c = palette[k % palette.size()];
    for (std::size_t i = 0; i + 1 < s.size(); ++i) {
      if (!std::isfinite(s[i]) || !std::isfinite(s[i + 1])) continue;
      const int steps = 16;
      for (int j = 0; j <= steps; ++j) {
        const double u = (i + double(j) / steps) / double(std::max<std::size_t>(1, s.size() - 1));
        const double v = s[i] + (s[i + 1] - s[i]) * j / steps;
        plot(u, (v - lo) / (hi - lo), c);
      }
    }
  }
  return img;
}

}  // namespace mthu::image
