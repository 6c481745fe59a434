#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace vlmr3 {

struct ImageDims {
  int width = 0;
  int height = 0;

  long long pixels() const { return static_cast<long long>(width) * height; }
  friend bool operator==(const ImageDims&, const ImageDims&) = default;
};

// Interleaved 8-bit raster, 1 (gray) or 3 (RGB) channels, row-major.
struct Image {
  int width = 0;
  int height = 0;
  int channels = 1;
  std::vector<std::uint8_t> data;

  Image() = default;
  Image(int w, int h, int c, std::uint8_t fill = 0);

  ImageDims dims() const { return {width, height}; }
  bool empty() const { return width <= 0 || height <= 0; }

  std::uint8_t& at(int x, int y, int c = 0) {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  std::uint8_t at(int x, int y, int c = 0) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }

  friend bool operator==(const Image&, const Image&) = default;
};

// Binary PGM (P5) / PPM (P6) with maxval 255.
Image read_pnm(const std::filesystem::path& path);
Image decode_pnm(const std::string& bytes);
std::string encode_pnm(const Image& image);
void write_pnm(const Image& image, const std::filesystem::path& path);

// Minimal non-interlaced 8-bit PNG (gray or RGB), used for remote uploads.
std::string encode_png(const Image& image);

}  // namespace vlmr3
