#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "vlmr3/error.hpp"
#include "vlmr3/image.hpp"

namespace vlmr3 {

inline constexpr long long kMinPixels = 3136;
inline constexpr long long kMaxPixels = 1605632;

// Integer pixel box in the working-image frame. Half-open: covers columns
// [x1, x2) and rows [y1, y2).
struct BBox {
  int x1 = 0;
  int y1 = 0;
  int x2 = 0;
  int y2 = 0;

  int width() const { return x2 - x1; }
  int height() const { return y2 - y1; }
  long long area() const { return static_cast<long long>(width()) * height(); }
  bool contains(const BBox& inner) const {
    return inner.x1 >= x1 && inner.y1 >= y1 && inner.x2 <= x2 && inner.y2 <= y2;
  }

  friend bool operator==(const BBox&, const BBox&) = default;
};

// Clamps into [0, width] x [0, height]; throws DegenerateBox if the clamped
// area is zero.
BBox make_bbox(long long x1, long long y1, long long x2, long long y2, ImageDims dims);

double iou(const BBox& a, const BBox& b);

struct CharSpan {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  friend bool operator==(const CharSpan&, const CharSpan&) = default;
};

struct TokenSpan {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  friend bool operator==(const TokenSpan&, const TokenSpan&) = default;
};

struct CropAction {
  std::array<long long, 4> requested{};  // coordinates as written by the model
  std::optional<BBox> bbox;               // clamped request; empty when degenerate
  std::optional<BBox> executed_bbox;      // what the environment cropped, if anything
  std::string raw_text;
  CharSpan char_span;
  int turn_index = 0;
  bool inside_think = false;
  bool valid = false;
  bool redundant = false;
  bool executed = false;
  bool perturbed = false;
};

enum class SegmentKind { ModelText, InjectedImage };

// Zoomed crop handed back to the policy. Produced by vision::make_region_evidence.
struct RegionEvidence {
  std::shared_ptr<const Image> pixels;
  BBox source;
  double area_ratio = 0.0;
  double scale = 1.0;
  int width = 0;
  int height = 0;
};

struct Segment {
  SegmentKind kind = SegmentKind::ModelText;
  TokenSpan token_span;
  CharSpan char_span;                    // ModelText only
  std::optional<RegionEvidence> region;  // InjectedImage only
  int crop_index = -1;                   // InjectedImage: index into crop_actions
};

struct RewardBreakdown {
  double accuracy = 0.0;
  double format = 0.0;
  double validity = 0.0;
  double length = 0.0;
  double total = 0.0;

  static RewardBreakdown from_components(double accuracy, double format, double validity,
                                         double length);
};

enum class InjectionMode { Interleaved, TextOnly };

std::string_view to_string(InjectionMode mode);
InjectionMode parse_injection_mode(std::string_view text);

inline constexpr std::int32_t kInjectedToken = -1;

struct Trajectory {
  std::string question_id;
  std::string transcript;  // model text only, concatenated in order
  std::vector<Segment> segments;
  std::vector<CropAction> crop_actions;
  std::vector<std::int32_t> token_ids;  // kInjectedToken on injected positions
  std::vector<double> token_logprobs;   // NaN where not reported
  std::optional<std::string> think_text;
  std::optional<std::string> answer_text;
  bool format_ok = false;
  bool token_budget_hit = false;
  bool crop_budget_hit = false;
  InjectionMode injection_mode = InjectionMode::Interleaved;
  std::uint64_t seed = 0;
  std::optional<RewardBreakdown> reward;

  std::size_t injected_segment_count() const;
  std::size_t executed_crop_count() const;
  std::size_t valid_crop_count() const;
};

// Throws SpanMismatch unless segments tile [0, token_ids.size()) in order.
void check_segment_partition(const Trajectory& trajectory);

struct EpisodeInput;

struct GroupBatch {
  std::string question_id;
  std::vector<Trajectory> trajectories;
  std::optional<std::vector<double>> advantages;
  std::shared_ptr<const EpisodeInput> input;
  std::string ground_truth;
};

struct PolicyConfig {
  int group_size = 5;
  double beta = 0.0;
  int max_crop_turns = 8;
  long long min_pixels = kMinPixels;
  long long max_pixels = kMaxPixels;
  double iou_redundancy_threshold = 0.9;
  InjectionMode injection_mode = InjectionMode::Interleaved;
  std::uint64_t rng_seed = 0;

  void validate() const;
};

}  // namespace vlmr3
