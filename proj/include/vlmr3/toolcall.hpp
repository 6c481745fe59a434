#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "vlmr3/core.hpp"

namespace vlmr3::toolcall {

inline constexpr std::string_view kThinkOpen = "<think>";
inline constexpr std::string_view kThinkClose = "</think>";
inline constexpr std::string_view kAnswerOpen = "<answer>";
inline constexpr std::string_view kAnswerClose = "</answer>";

struct CommandMatch {
  std::string raw;
  std::array<long long, 4> coords{};
  CharSpan span;
};

// Every `{"bbox_2d": [x1, y1, x2, y2]}` object in `text`, in order. Whitespace
// is allowed between tokens; the key and the four-integer shape are strict.
std::vector<CommandMatch> scan_crop_commands(std::string_view text);

// Matches a command that ends exactly at the end of `text`.
std::optional<CommandMatch> trailing_crop_command(std::string_view text);

// Canonical rendering, e.g. {"bbox_2d": [1, 2, 3, 4]}.
std::string format_crop_command(const BBox& box);

struct ParsedTranscript {
  std::optional<std::string> think_text;
  std::optional<std::string> answer_text;
  bool format_ok = false;
  std::vector<CropAction> crop_commands;
};

struct ParseOptions {
  // When set, boxes are clamped into this frame; otherwise they must already
  // be well-ordered with non-negative coordinates.
  std::optional<ImageDims> frame;
  double iou_threshold = 0.9;
};

// Total: never throws on any input.
ParsedTranscript parse_transcript(std::string_view text, const ParseOptions& options = {});

// Byte range strictly inside the first <think> ... </think>, if closed.
std::optional<CharSpan> think_body(std::string_view text);

// True if `offset` lies after an unmatched <think> that has not yet been
// closed, with no <answer> opened before it.
bool inside_open_think(std::string_view text, std::size_t offset);

bool is_redundant(const BBox& box, std::span<const BBox> prior, double iou_threshold);

}  // namespace vlmr3::toolcall
