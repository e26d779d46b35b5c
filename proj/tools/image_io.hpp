#pragma once

// PNG (8-bit RGB / gray) and raw float32 grid output for rendered views and
// error maps.

#include "dynafuse/image.hpp"

#include <png.h>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dynafuse::cli {

namespace detail {

inline void write_png_rows(const std::string& path, int width, int height, int channels,
                           const std::vector<std::uint8_t>& data) {
  std::FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw std::runtime_error("cannot open '" + path + "' for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw std::runtime_error("libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw std::runtime_error("libpng failed writing '" + path + "'");
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
               channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < height; ++y) {
    png_write_row(png, const_cast<png_bytep>(data.data() + static_cast<std::size_t>(y) * width * channels));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

inline std::uint8_t to_byte(double v) {
  if (!std::isfinite(v)) return 0;
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace detail

inline void write_png(const std::string& path, const ImageBuffer& img) {
  std::vector<std::uint8_t> bytes(img.data().size());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = detail::to_byte(img.data()[i]);
  detail::write_png_rows(path, img.width(), img.height(), 3, bytes);
}

/// Gray PNG of a scalar map scaled by 1/max (NaN → 0).
inline void write_png(const std::string& path, const ScalarMap& map) {
  double mx = 0.0;
  for (double v : map.data())
    if (std::isfinite(v)) mx = std::max(mx, v);
  const double s = mx > 0.0 ? 1.0 / mx : 0.0;
  std::vector<std::uint8_t> bytes(map.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = detail::to_byte(map.data()[i] * s);
  detail::write_png_rows(path, map.width(), map.height(), 1, bytes);
}

/// Header: int32 height, int32 width, int32 channels; then row-major float32.
inline void write_float32(const std::string& path, std::span<const double> data, int height,
                          int width, int channels) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  const std::int32_t hdr[3] = {height, width, channels};
  out.write(reinterpret_cast<const char*>(hdr), sizeof(hdr));
  for (double v : data) {
    const float f = static_cast<float>(v);
    out.write(reinterpret_cast<const char*>(&f), sizeof(f));
  }
}

struct Float32Grid {
  int height = 0, width = 0, channels = 0;
  std::vector<float> data;
};

inline Float32Grid read_float32(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  std::int32_t hdr[3];
  if (!in.read(reinterpret_cast<char*>(hdr), sizeof(hdr))) {
    throw std::runtime_error("'" + path + "': truncated header");
  }
  if (hdr[0] <= 0 || hdr[1] <= 0 || hdr[2] <= 0) {
    throw std::runtime_error("'" + path + "': bad dimensions");
  }
  Float32Grid g{hdr[0], hdr[1], hdr[2], {}};
  g.data.resize(static_cast<std::size_t>(g.height) * g.width * g.channels);
  if (!in.read(reinterpret_cast<char*>(g.data.data()),
               static_cast<std::streamsize>(g.data.size() * sizeof(float)))) {
    throw std::runtime_error("'" + path + "': truncated data");
  }
  return g;
}

}  // namespace dynafuse::cli
