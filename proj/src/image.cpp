#include "vlmr3/image.hpp"

#include <png.h>

#include <array>
#include <cctype>
#include <fstream>
#include <sstream>

#include "vlmr3/error.hpp"

namespace vlmr3 {

Image::Image(int w, int h, int c, std::uint8_t fill)
    : width(w), height(h), channels(c),
      data(static_cast<std::size_t>(w > 0 ? w : 0) * (h > 0 ? h : 0) * c, fill) {
  if (c != 1 && c != 3) throw Error(ErrorCode::InvalidArgument, "channels must be 1 or 3");
}

namespace {

// Reads the next header integer, skipping whitespace and # comments.
int next_header_int(const std::string& bytes, std::size_t& pos) {
  while (pos < bytes.size()) {
    if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
      ++pos;
    } else if (bytes[pos] == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
    } else {
      break;
    }
  }
  long value = 0;
  std::size_t start = pos;
  while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
    value = value * 10 + (bytes[pos] - '0');
    if (value > 1 << 24) throw Error(ErrorCode::IoError, "pnm header value too large");
    ++pos;
  }
  if (pos == start) throw Error(ErrorCode::IoError, "malformed pnm header");
  return static_cast<int>(value);
}

}  // namespace

Image decode_pnm(const std::string& bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6'))
    throw Error(ErrorCode::IoError, "only binary P5/P6 images are supported");
  const int channels = bytes[1] == '5' ? 1 : 3;
  std::size_t pos = 2;
  const int w = next_header_int(bytes, pos);
  const int h = next_header_int(bytes, pos);
  const int maxval = next_header_int(bytes, pos);
  if (maxval != 255) throw Error(ErrorCode::IoError, "only maxval 255 is supported");
  if (w <= 0 || h <= 0) throw Error(ErrorCode::EmptyImage, "zero-dimension pnm");
  ++pos;  // single whitespace byte before the raster
  Image img(w, h, channels);
  if (bytes.size() < pos + img.data.size()) throw Error(ErrorCode::IoError, "truncated pnm raster");
  std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(pos), img.data.size(), img.data.begin());
  return img;
}

Image read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_pnm(ss.str());
}

std::string encode_pnm(const Image& image) {
  std::string out = (image.channels == 1 ? "P5\n" : "P6\n") + std::to_string(image.width) + " " +
                    std::to_string(image.height) + "\n255\n";
  out.append(image.data.begin(), image.data.end());
  return out;
}

void write_pnm(const Image& image, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  const std::string bytes = encode_pnm(image);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::string encode_png(const Image& image) {
  if (image.empty()) throw Error(ErrorCode::EmptyImage, "cannot encode empty image");
  if (image.channels != 1 && image.channels != 3)
    throw Error(ErrorCode::InvalidArgument, "png encoding supports 1 or 3 channels");
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = image.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&png, nullptr, &size, 0, image.data.data(), 0, nullptr))
    throw Error(ErrorCode::IoError, std::string("png encoding failed: ") + png.message);
  std::string out(size, '\0');
  if (!png_image_write_to_memory(&png, out.data(), &size, 0, image.data.data(), 0, nullptr))
    throw Error(ErrorCode::IoError, std::string("png encoding failed: ") + png.message);
  out.resize(size);
  return out;
}

}  // namespace vlmr3
