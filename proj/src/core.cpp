#include "vlmr3/core.hpp"

#include <algorithm>
#include <cmath>

namespace vlmr3 {

BBox make_bbox(long long x1, long long y1, long long x2, long long y2, ImageDims dims) {
  if (dims.width <= 0 || dims.height <= 0)
    throw Error(ErrorCode::InvalidArgument, "image dimensions must be positive");
  const auto cx = [&](long long v) { return static_cast<int>(std::clamp<long long>(v, 0, dims.width)); };
  const auto cy = [&](long long v) { return static_cast<int>(std::clamp<long long>(v, 0, dims.height)); };
  BBox box{cx(x1), cy(y1), cx(x2), cy(y2)};
  if (box.x1 >= box.x2 || box.y1 >= box.y2)
    throw Error(ErrorCode::DegenerateBox,
                "clamped box [" + std::to_string(box.x1) + ", " + std::to_string(box.y1) + ", " +
                    std::to_string(box.x2) + ", " + std::to_string(box.y2) + "] has zero area");
  return box;
}

double iou(const BBox& a, const BBox& b) {
  const long long ix = std::max(0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const long long iy = std::max(0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const long long inter = ix * iy;
  const long long uni = a.area() + b.area() - inter;
  if (uni <= 0) return 0.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

RewardBreakdown RewardBreakdown::from_components(double accuracy, double format, double validity,
                                                 double length) {
  RewardBreakdown r;
  r.accuracy = accuracy;
  r.format = format;
  r.validity = validity;
  r.length = length;
  r.total = accuracy + format + validity + length;
  return r;
}

std::string_view to_string(InjectionMode mode) {
  return mode == InjectionMode::Interleaved ? "interleaved" : "text_only";
}

InjectionMode parse_injection_mode(std::string_view text) {
  if (text == "interleaved" || text == "INTERLEAVED") return InjectionMode::Interleaved;
  if (text == "text_only" || text == "TEXT_ONLY" || text == "text-only")
    return InjectionMode::TextOnly;
  throw Error(ErrorCode::ConfigError, "unknown injection mode '" + std::string(text) + "'");
}

std::size_t Trajectory::injected_segment_count() const {
  return static_cast<std::size_t>(std::count_if(segments.begin(), segments.end(), [](const Segment& s) {
    return s.kind == SegmentKind::InjectedImage;
  }));
}

std::size_t Trajectory::executed_crop_count() const {
  return static_cast<std::size_t>(
      std::count_if(crop_actions.begin(), crop_actions.end(), [](const CropAction& a) { return a.executed; }));
}

std::size_t Trajectory::valid_crop_count() const {
  return static_cast<std::size_t>(
      std::count_if(crop_actions.begin(), crop_actions.end(), [](const CropAction& a) { return a.valid; }));
}

void check_segment_partition(const Trajectory& trajectory) {
  std::size_t cursor = 0;
  for (const auto& seg : trajectory.segments) {
    if (seg.token_span.begin != cursor || seg.token_span.end < seg.token_span.begin)
      throw Error(ErrorCode::SpanMismatch, "segment token spans are not contiguous at " +
                                               std::to_string(cursor));
    cursor = seg.token_span.end;
  }
  if (cursor != trajectory.token_ids.size())
    throw Error(ErrorCode::SpanMismatch, "segments cover " + std::to_string(cursor) + " of " +
                                             std::to_string(trajectory.token_ids.size()) + " tokens");
}

void PolicyConfig::validate() const {
  if (group_size < 2) throw Error(ErrorCode::ConfigError, "group size M must be >= 2");
  if (!(beta >= 0.0)) throw Error(ErrorCode::ConfigError, "beta must be >= 0");
  if (max_crop_turns < 0) throw Error(ErrorCode::ConfigError, "max_crop_turns must be >= 0");
  if (min_pixels >= max_pixels) throw Error(ErrorCode::ConfigError, "min_pixels must be < max_pixels");
  if (!(iou_redundancy_threshold > 0.0 && iou_redundancy_threshold <= 1.0))
    throw Error(ErrorCode::ConfigError, "iou threshold must be in (0, 1]");
}

}  // namespace vlmr3
