#pragma once

#include <span>
#include <string>
#include <string_view>

#include "vlmr3/core.hpp"
#include "vlmr3/toolcall.hpp"

namespace vlmr3::rewards {

inline constexpr double kValidityReward = 0.5;
inline constexpr double kLengthRewardPerChar = 0.001;
inline constexpr double kLengthRewardCap = 0.25;
inline constexpr double kMaxTotalReward = 2.75;

struct JudgeConfig {
  bool lowercase = true;
  bool strip = true;
  bool collapse_whitespace = true;
};

std::string normalize_answer(std::string_view text, const JudgeConfig& cfg);

int exact_match(std::string_view predicted, std::string_view ground_truth,
                const JudgeConfig& cfg = {});

// Number of UTF-8 code points; stray continuation bytes are not counted.
std::size_t code_point_count(std::string_view text);

double accuracy_reward(const Trajectory& trajectory, std::string_view ground_truth,
                       const JudgeConfig& cfg = {});
double format_reward(const toolcall::ParsedTranscript& parsed);
double format_reward(const Trajectory& trajectory);
// Awarded once: the first valid, non-redundant crop reaches the cap.
double region_validity_reward(std::span<const CropAction> actions);
double length_reward(std::string_view think_text);

// Computes every component, stores it on the trajectory and returns it.
RewardBreakdown total_reward(Trajectory& trajectory, std::string_view ground_truth,
                             const JudgeConfig& cfg = {});

}  // namespace vlmr3::rewards
