#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"
#include "vlmr3/vision.hpp"

using namespace vlmr3;
using namespace vlmr3::vision;

TEST(ZoomScale, Branches) {
  EXPECT_DOUBLE_EQ(zoom_scale(0.10), 2.0);
  EXPECT_DOUBLE_EQ(zoom_scale(0.50), 1.0);
  EXPECT_DOUBLE_EQ(zoom_scale(0.3125), 1.5);
  EXPECT_NEAR(zoom_scale(0.20), 1.8, 1e-12);
  EXPECT_DOUBLE_EQ(zoom_scale(1.0), 1.0);
}

TEST(ZoomScale, DomainErrors) {
  for (double r : {0.0, -0.1, 1.0000001}) {
    try {
      zoom_scale(r);
      FAIL() << r;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::DomainError);
    }
  }
}

TEST(ZoomScale, ContinuousAndMonotone) {
  EXPECT_NEAR(zoom_scale(0.125 - 1e-9), zoom_scale(0.125 + 1e-9), 1e-8);
  EXPECT_NEAR(zoom_scale(0.5 - 1e-9), zoom_scale(0.5 + 1e-9), 1e-8);
  double prev = 2.0;
  for (int i = 1; i <= 10000; ++i) {
    const double s = zoom_scale(i / 10000.0);
    EXPECT_LE(s, prev);
    EXPECT_GE(s, 1.0);
    EXPECT_LE(s, 2.0);
    prev = s;
  }
}

TEST(Rounding, HalfUpWithFloor) {
  EXPECT_EQ(round_dimension(91.5), 92);
  EXPECT_EQ(round_dimension(91.49), 91);
  EXPECT_EQ(round_dimension(0.2), 1);
}

TEST(ApplyZoom, Dimensions) {
  const Image sub = fixtures::ramp_image(60, 60);
  const auto doubled = apply_zoom(sub, 2.0, {0, 0, 60, 60}, 0.1);
  EXPECT_EQ(doubled.width, 120);
  EXPECT_EQ(doubled.pixels->height, 120);
  const auto same = apply_zoom(sub, 1.0, {0, 0, 60, 60}, 0.6);
  EXPECT_EQ(*same.pixels, sub);
  // 61 * 1.5 = 91.5 rounds half-up.
  const auto odd = apply_zoom(fixtures::ramp_image(61, 61), 1.5, {0, 0, 61, 61}, 0.3125);
  EXPECT_EQ(static_cast<int>(std::floor(61 * 1.5 + 0.5)), 92);
  EXPECT_EQ(odd.width, 92);
  EXPECT_EQ(odd.height, 92);
  EXPECT_THROW(apply_zoom(sub, 2.5, {0, 0, 60, 60}, 0.1), Error);
}

TEST(Resize, ConstantImageStaysConstant) {
  const Image flat(17, 9, 3, 77);
  const Image big = resize_bilinear(flat, 40, 23);
  for (auto v : big.data) EXPECT_EQ(v, 77);
}

TEST(Normalize, Upscales50To56) {
  const auto w = normalize_pixels(fixtures::ramp_image(50, 50));
  EXPECT_EQ(56 * 56, 3136);
  EXPECT_EQ(w.dims(), (ImageDims{56, 56}));
  EXPECT_EQ(w.original, (ImageDims{50, 50}));
}

TEST(Normalize, IdentityWithinBounds) {
  const Image img = fixtures::ramp_image(1000, 1000);
  const auto w = normalize_pixels(img);
  EXPECT_EQ(*w.image, img);
}

TEST(Normalize, DownscalesLargeImage) {
  const auto w = normalize_pixels(Image(2000, 1000, 1, 5));
  EXPECT_LE(w.total_pixels(), kMaxPixels);
  EXPECT_GE(w.total_pixels(), kMinPixels);
  EXPECT_NEAR(static_cast<double>(w.dims().width) / w.dims().height, 2.0, 0.01);
}

TEST(Normalize, BoundsAndIdempotence) {
  for (auto [wd, ht] : std::vector<std::pair<int, int>>{{1, 1}, {3, 1000}, {7, 13}, {2500, 900}, {1267, 1267}}) {
    const auto once = normalize_pixels(Image(wd, ht, 1, 9));
    EXPECT_GE(once.total_pixels(), kMinPixels) << wd << "x" << ht;
    EXPECT_LE(once.total_pixels(), kMaxPixels) << wd << "x" << ht;
    const auto twice = normalize_pixels(*once.image);
    EXPECT_EQ(twice.dims(), once.dims());
  }
  EXPECT_THROW(normalize_pixels(Image()), Error);
}

TEST(Crop, ExactRegionAndComposition) {
  const Image img = fixtures::ramp_image(80, 60);
  EXPECT_EQ(crop(img, {0, 0, 80, 60}), img);
  const Image tl = crop(img, {0, 0, 10, 10});
  EXPECT_EQ(tl.width, 10);
  for (int y = 0; y < 10; ++y)
    for (int x = 0; x < 10; ++x) EXPECT_EQ(tl.at(x, y), img.at(x, y));
  const Image outer = crop(img, {10, 5, 70, 50});
  EXPECT_EQ(crop(outer, {5, 5, 25, 30}), crop(img, {15, 10, 35, 35}));
  EXPECT_THROW(crop(img, {0, 0, 90, 10}), Error);
}

TEST(RegionEvidence, ArithmeticFromWorkingImage) {
  const auto in = fixtures::ramp_input(200, 100);
  const BBox box{10, 10, 50, 40};
  const auto ev = make_region_evidence(in->image, box);
  const double r = 40.0 * 30.0 / (200.0 * 100.0);
  EXPECT_DOUBLE_EQ(ev.area_ratio, r);
  EXPECT_DOUBLE_EQ(ev.scale, 2.0);
  EXPECT_EQ(ev.width, 80);
  EXPECT_EQ(ev.height, 60);
  EXPECT_EQ(ev.source, box);
}
