#include "vlmr3/rewards.hpp"

#include <algorithm>
#include <cctype>

namespace vlmr3::rewards {
namespace {

bool is_space(unsigned char c) { return std::isspace(c) != 0; }

}  // namespace

std::string normalize_answer(std::string_view text, const JudgeConfig& cfg) {
  std::string s(text);
  if (cfg.lowercase)
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) {
      return c < 0x80 ? static_cast<char>(std::tolower(c)) : static_cast<char>(c);
    });
  if (cfg.strip) {
    std::size_t b = 0, e = s.size();
    while (b < e && is_space(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && is_space(static_cast<unsigned char>(s[e - 1]))) --e;
    s = s.substr(b, e - b);
  }
  if (cfg.collapse_whitespace) {
    std::string out;
    out.reserve(s.size());
    bool in_run = false;
    for (char c : s) {
      if (is_space(static_cast<unsigned char>(c))) {
        if (!in_run) out.push_back(' ');
        in_run = true;
      } else {
        out.push_back(c);
        in_run = false;
      }
    }
    s = std::move(out);
  }
  return s;
}

int exact_match(std::string_view predicted, std::string_view ground_truth, const JudgeConfig& cfg) {
  return normalize_answer(predicted, cfg) == normalize_answer(ground_truth, cfg) ? 1 : 0;
}

std::size_t code_point_count(std::string_view text) {
  return static_cast<std::size_t>(std::count_if(text.begin(), text.end(), [](char c) {
    return (static_cast<unsigned char>(c) & 0xC0) != 0x80;
  }));
}

double accuracy_reward(const Trajectory& trajectory, std::string_view ground_truth,
                       const JudgeConfig& cfg) {
  if (!trajectory.answer_text) return 0.0;
  return exact_match(*trajectory.answer_text, ground_truth, cfg);
}

double format_reward(const toolcall::ParsedTranscript& parsed) { return parsed.format_ok ? 1.0 : 0.0; }
double format_reward(const Trajectory& trajectory) { return trajectory.format_ok ? 1.0 : 0.0; }

double region_validity_reward(std::span<const CropAction> actions) {
  const bool any = std::any_of(actions.begin(), actions.end(),
                               [](const CropAction& a) { return a.valid && !a.redundant; });
  return any ? kValidityReward : 0.0;
}

double length_reward(std::string_view think_text) {
  const double chars = static_cast<double>(code_point_count(think_text));
  return std::min(chars / 1000.0, kLengthRewardCap);
}

RewardBreakdown total_reward(Trajectory& trajectory, std::string_view ground_truth,
                             const JudgeConfig& cfg) {
  auto r = RewardBreakdown::from_components(
      accuracy_reward(trajectory, ground_truth, cfg), format_reward(trajectory),
      region_validity_reward(trajectory.crop_actions),
      length_reward(trajectory.think_text.value_or(std::string())));
  trajectory.reward = r;
  return r;
}

}  // namespace vlmr3::rewards
