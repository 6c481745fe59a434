#pragma once

#include <string>
#include <string_view>

namespace vlmr3::prompts {

// Instruction given to the policy at the start of every episode.
extern const std::string_view kSystemInstruction;

// Corpus construction and filtering templates. Placeholders are literal:
// {question}, {crop}, {ground-truth answer}, {reasoning process}.
extern const std::string_view kConstructFromQa;
extern const std::string_view kConstructFromBbox;
extern const std::string_view kFilterRegion;
extern const std::string_view kFilterReasoning;

// Replaces every occurrence of `placeholder` with `value`.
std::string fill(std::string_view tmpl, std::string_view placeholder, std::string_view value);

std::string render_construct_from_qa(std::string_view question);
std::string render_construct_from_bbox(std::string_view question, std::string_view crop);
std::string render_filter_reasoning(std::string_view question, std::string_view ground_truth,
                                    std::string_view rationale);

}  // namespace vlmr3::prompts
