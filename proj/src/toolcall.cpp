#include "vlmr3/toolcall.hpp"

#include <algorithm>

namespace vlmr3::toolcall {
namespace {

constexpr std::string_view kKey = "\"bbox_2d\"";
constexpr int kMaxDigits = 15;

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

class Cursor {
 public:
  Cursor(std::string_view text, std::size_t pos) : text_(text), pos_(pos) {}

  void skip_space() {
    while (pos_ < text_.size() && is_space(text_[pos_])) ++pos_;
  }
  bool literal(std::string_view lit) {
    skip_space();
    if (text_.substr(pos_, lit.size()) != lit) return false;
    pos_ += lit.size();
    return true;
  }
  bool integer(long long& out) {
    skip_space();
    bool negative = false;
    if (pos_ < text_.size() && text_[pos_] == '-') {
      negative = true;
      ++pos_;
    }
    long long value = 0;
    int digits = 0;
    while (pos_ < text_.size() && text_[pos_] >= '0' && text_[pos_] <= '9') {
      if (++digits > kMaxDigits) return false;
      value = value * 10 + (text_[pos_] - '0');
      ++pos_;
    }
    if (digits == 0) return false;
    out = negative ? -value : value;
    return true;
  }
  std::size_t pos() const { return pos_; }

 private:
  std::string_view text_;
  std::size_t pos_;
};

// Attempts the command grammar starting at the '{' at `start`.
std::optional<CommandMatch> match_at(std::string_view text, std::size_t start) {
  Cursor c(text, start + 1);
  CommandMatch m;
  if (!c.literal(kKey) || !c.literal(":") || !c.literal("[")) return std::nullopt;
  for (int i = 0; i < 4; ++i) {
    if (i > 0 && !c.literal(",")) return std::nullopt;
    if (!c.integer(m.coords[static_cast<std::size_t>(i)])) return std::nullopt;
  }
  if (!c.literal("]") || !c.literal("}")) return std::nullopt;
  m.span = {start, c.pos()};
  m.raw = std::string(text.substr(start, c.pos() - start));
  return m;
}

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && is_space(s[b])) ++b;
  while (e > b && is_space(s[e - 1])) --e;
  return std::string(s.substr(b, e - b));
}

std::size_t count_occurrences(std::string_view text, std::string_view needle) {
  std::size_t n = 0;
  for (std::size_t pos = text.find(needle); pos != std::string_view::npos;
       pos = text.find(needle, pos + needle.size()))
    ++n;
  return n;
}

bool only_space(std::string_view s) {
  return std::all_of(s.begin(), s.end(), is_space);
}

}  // namespace

std::vector<CommandMatch> scan_crop_commands(std::string_view text) {
  std::vector<CommandMatch> out;
  std::size_t pos = 0;
  while ((pos = text.find('{', pos)) != std::string_view::npos) {
    if (auto m = match_at(text, pos)) {
      pos = m->span.end;
      out.push_back(std::move(*m));
    } else {
      ++pos;
    }
  }
  return out;
}

std::optional<CommandMatch> trailing_crop_command(std::string_view text) {
  if (text.empty() || text.back() != '}') return std::nullopt;
  // The object is short; only search the tail.
  const std::size_t window = std::min<std::size_t>(text.size(), 4096);
  const std::size_t base = text.size() - window;
  std::size_t pos = text.rfind('{');
  while (pos != std::string_view::npos && pos >= base) {
    if (auto m = match_at(text, pos); m && m->span.end == text.size()) return m;
    if (pos == 0) break;
    pos = text.rfind('{', pos - 1);
  }
  return std::nullopt;
}

std::string format_crop_command(const BBox& box) {
  return "{\"bbox_2d\": [" + std::to_string(box.x1) + ", " + std::to_string(box.y1) + ", " +
         std::to_string(box.x2) + ", " + std::to_string(box.y2) + "]}";
}

std::optional<CharSpan> think_body(std::string_view text) {
  const auto open = text.find(kThinkOpen);
  if (open == std::string_view::npos) return std::nullopt;
  const auto body = open + kThinkOpen.size();
  const auto close = text.find(kThinkClose, body);
  if (close == std::string_view::npos) return std::nullopt;
  return CharSpan{body, close};
}

bool inside_open_think(std::string_view text, std::size_t offset) {
  const auto prefix = text.substr(0, std::min(offset, text.size()));
  const auto open = prefix.find(kThinkOpen);
  if (open == std::string_view::npos) return false;
  if (prefix.find(kAnswerOpen) < open) return false;
  return prefix.find(kThinkClose, open) == std::string_view::npos;
}

bool is_redundant(const BBox& box, std::span<const BBox> prior, double iou_threshold) {
  return std::any_of(prior.begin(), prior.end(),
                     [&](const BBox& p) { return iou(box, p) > iou_threshold; });
}

ParsedTranscript parse_transcript(std::string_view text, const ParseOptions& options) {
  ParsedTranscript out;

  const auto think_open = text.find(kThinkOpen);
  const auto think_close = think_open == std::string_view::npos
                               ? std::string_view::npos
                               : text.find(kThinkClose, think_open + kThinkOpen.size());
  if (think_close != std::string_view::npos)
    out.think_text = trim(text.substr(think_open + kThinkOpen.size(),
                                      think_close - think_open - kThinkOpen.size()));

  const auto answer_search_from = think_close == std::string_view::npos ? 0 : think_close;
  auto answer_open = text.find(kAnswerOpen, answer_search_from);
  if (answer_open == std::string_view::npos) answer_open = text.find(kAnswerOpen);
  const auto answer_close = answer_open == std::string_view::npos
                                ? std::string_view::npos
                                : text.find(kAnswerClose, answer_open + kAnswerOpen.size());
  if (answer_close != std::string_view::npos)
    out.answer_text = trim(text.substr(answer_open + kAnswerOpen.size(),
                                       answer_close - answer_open - kAnswerOpen.size()));

  out.format_ok =
      count_occurrences(text, kThinkOpen) == 1 && count_occurrences(text, kThinkClose) == 1 &&
      count_occurrences(text, kAnswerOpen) == 1 && count_occurrences(text, kAnswerClose) == 1 &&
      think_close != std::string_view::npos && answer_close != std::string_view::npos &&
      think_open < think_close && think_close < answer_open &&
      only_space(text.substr(0, think_open)) &&
      only_space(text.substr(think_close + kThinkClose.size(),
                             answer_open - think_close - kThinkClose.size())) &&
      only_space(text.substr(answer_close + kAnswerClose.size()));

  // Crop commands count as "inside think" between <think> and its close, or
  // to the end of the text when the block never closes.
  const std::size_t body_begin =
      think_open == std::string_view::npos ? std::string_view::npos : think_open + kThinkOpen.size();
  const std::size_t body_end = think_close == std::string_view::npos ? text.size() : think_close;

  std::vector<BBox> accepted;
  int turn = 0;
  for (auto& m : scan_crop_commands(text)) {
    CropAction a;
    a.requested = m.coords;
    a.raw_text = std::move(m.raw);
    a.char_span = m.span;
    a.turn_index = turn++;
    a.inside_think = body_begin != std::string_view::npos && m.span.begin >= body_begin &&
                     m.span.end <= body_end;
    const auto [x1, y1, x2, y2] = a.requested;
    if (options.frame) {
      try {
        a.bbox = make_bbox(x1, y1, x2, y2, *options.frame);
      } catch (const Error&) {
      }
    } else if (x1 >= 0 && y1 >= 0 && x1 < x2 && y1 < y2 && x2 <= INT32_MAX && y2 <= INT32_MAX) {
      a.bbox = BBox{static_cast<int>(x1), static_cast<int>(y1), static_cast<int>(x2),
                    static_cast<int>(y2)};
    }
    a.valid = a.bbox.has_value() && a.inside_think;
    if (a.valid) {
      a.redundant = is_redundant(*a.bbox, accepted, options.iou_threshold);
      accepted.push_back(*a.bbox);
    }
    out.crop_commands.push_back(std::move(a));
  }
  return out;
}

}  // namespace vlmr3::toolcall
