#pragma once

#include <memory>

#include "vlmr3/core.hpp"
#include "vlmr3/image.hpp"

namespace vlmr3::vision {

// Pixel-bounded image the policy sees; crop coordinates refer to this frame.
struct WorkingImage {
  std::shared_ptr<const Image> image;
  ImageDims original;

  ImageDims dims() const { return image->dims(); }
  long long total_pixels() const { return dims().pixels(); }
};

// floor(x + 0.5), floored again at 1.
int round_dimension(double x);

Image resize_bilinear(const Image& src, int width, int height);

// Rescales so min_pixels <= w*h <= max_pixels, preserving aspect ratio.
WorkingImage normalize_pixels(const Image& image, long long min_pixels = kMinPixels,
                              long long max_pixels = kMaxPixels);

Image crop(const Image& image, const BBox& box);
inline Image crop(const WorkingImage& image, const BBox& box) { return crop(*image.image, box); }

// Magnification for a crop covering area ratio r of the working image:
// 2.0 below 0.125, 1.0 from 0.5 up, linear in between.
double zoom_scale(double area_ratio);

RegionEvidence apply_zoom(const Image& sub_image, double scale, const BBox& source,
                          double area_ratio);

// crop -> area ratio -> zoom_scale -> apply_zoom.
RegionEvidence make_region_evidence(const WorkingImage& image, const BBox& box);

}  // namespace vlmr3::vision
