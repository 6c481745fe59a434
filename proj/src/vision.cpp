#include "vlmr3/vision.hpp"

#include <algorithm>
#include <cmath>

namespace vlmr3::vision {

int round_dimension(double x) {
  const double r = std::floor(x + 0.5);
  return r < 1.0 ? 1 : static_cast<int>(r);
}

Image resize_bilinear(const Image& src, int width, int height) {
  if (src.empty()) throw Error(ErrorCode::EmptyImage, "resize of an empty image");
  if (width <= 0 || height <= 0) throw Error(ErrorCode::InvalidArgument, "target size must be positive");
  if (width == src.width && height == src.height) return src;

  Image dst(width, height, src.channels);
  const double sx = static_cast<double>(src.width) / width;
  const double sy = static_cast<double>(src.height) / height;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.height - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, src.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.width - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, src.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < src.channels; ++c) {
        const double top = src.at(x0, y0, c) * (1.0 - wx) + src.at(x1, y0, c) * wx;
        const double bottom = src.at(x0, y1, c) * (1.0 - wx) + src.at(x1, y1, c) * wx;
        const double v = top * (1.0 - wy) + bottom * wy;
        dst.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(std::floor(v + 0.5), 0.0, 255.0));
      }
    }
  }
  return dst;
}

WorkingImage normalize_pixels(const Image& image, long long min_pixels, long long max_pixels) {
  if (image.empty()) throw Error(ErrorCode::EmptyImage, "image has a zero dimension");
  if (min_pixels >= max_pixels) throw Error(ErrorCode::InvalidArgument, "min_pixels must be < max_pixels");

  const long long pixels = image.dims().pixels();
  WorkingImage out;
  out.original = image.dims();
  if (pixels >= min_pixels && pixels <= max_pixels) {
    out.image = std::make_shared<const Image>(image);
    return out;
  }

  const bool grow = pixels < min_pixels;
  const double s = std::sqrt(static_cast<double>(grow ? min_pixels : max_pixels) / pixels);
  int w = round_dimension(image.width * s);
  int h = round_dimension(image.height * s);
  // Rounding to nearest can land just outside the bound; ceil (growing) or
  // floor (shrinking) both dimensions then, which stays within one pixel.
  const long long area = static_cast<long long>(w) * h;
  if (grow && area < min_pixels) {
    w = std::max(1, static_cast<int>(std::ceil(image.width * s)));
    h = std::max(1, static_cast<int>(std::ceil(image.height * s)));
  } else if (!grow && area > max_pixels) {
    w = std::max(1, static_cast<int>(std::floor(image.width * s)));
    h = std::max(1, static_cast<int>(std::floor(image.height * s)));
  }
  out.image = std::make_shared<const Image>(resize_bilinear(image, w, h));
  return out;
}

Image crop(const Image& image, const BBox& box) {
  if (box.x1 < 0 || box.y1 < 0 || box.x2 > image.width || box.y2 > image.height)
    throw Error(ErrorCode::InvalidArgument, "box lies outside the image");
  if (box.x1 >= box.x2 || box.y1 >= box.y2) throw Error(ErrorCode::DegenerateBox, "crop box has zero area");

  Image out(box.width(), box.height(), image.channels);
  const std::size_t row = static_cast<std::size_t>(box.width()) * image.channels;
  for (int y = box.y1; y < box.y2; ++y) {
    const auto* src = image.data.data() + (static_cast<std::size_t>(y) * image.width + box.x1) * image.channels;
    std::copy_n(src, row, out.data.data() + static_cast<std::size_t>(y - box.y1) * row);
  }
  return out;
}

double zoom_scale(double area_ratio) {
  if (!(area_ratio > 0.0) || area_ratio > 1.0)
    throw Error(ErrorCode::DomainError, "area ratio must lie in (0, 1], got " + std::to_string(area_ratio));
  if (area_ratio < 0.125) return 2.0;
  if (area_ratio >= 0.5) return 1.0;
  return 2.0 - (area_ratio - 0.125) / 0.375;
}

RegionEvidence apply_zoom(const Image& sub_image, double scale, const BBox& source, double area_ratio) {
  if (sub_image.empty()) throw Error(ErrorCode::EmptyImage, "zoom of an empty crop");
  if (!(scale >= 1.0 && scale <= 2.0)) throw Error(ErrorCode::DomainError, "zoom scale must lie in [1, 2]");
  RegionEvidence ev;
  ev.width = round_dimension(sub_image.width * scale);
  ev.height = round_dimension(sub_image.height * scale);
  ev.pixels = std::make_shared<const Image>(resize_bilinear(sub_image, ev.width, ev.height));
  ev.source = source;
  ev.area_ratio = area_ratio;
  ev.scale = scale;
  return ev;
}

RegionEvidence make_region_evidence(const WorkingImage& image, const BBox& box) {
  const double ratio = static_cast<double>(box.area()) / static_cast<double>(image.total_pixels());
  return apply_zoom(crop(image, box), zoom_scale(ratio), box, ratio);
}

}  // namespace vlmr3::vision
