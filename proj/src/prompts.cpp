#include "vlmr3/prompts.hpp"

#include <utility>
#include <vector>

namespace vlmr3::prompts {

const std::string_view kSystemInstruction = R"PROMPT(You need to first think about the reasoning process in your mind, and then 
provide the answer. When thinking, you should call the "crop" tool (format: 
{"bbox_2d": [x1, y1, x2, y2]}) to focus on the key areas in the image. The 
reasoning process and the answer are included in the <think> </think> and 
<answer> </answer> tags respectively.)PROMPT";

const std::string_view kConstructFromQa = R"PROMPT(You are performing "Multimodal Interleaved Reasoning". During the thinking 
process, you need to keep an eye on the visual cues in the original image, 
find regions of the image that help answer the question, and use the "Crop" 
tool to crop and zoom in for detailed analysis.
When using the tool, you must output a JSON object in the following format:
{"bbox_2d": [x1, y1, x2, y2]}
Ensure that you "Crop" at least once.
Continue thinking after each operation until you reach the final answer. 
Output the thinking process within a pair of <think> </think> tags and then 
output the final answer within a pair of <answer> </answer> tags.
{question})PROMPT";

const std::string_view kConstructFromBbox = R"PROMPT(I will now provide you with an image, a question, and a "Crop" operation 
string. Your task is to write the reasoning process used to answer the 
question as instructed. During the reasoning process, the respondent 
utilizes a "Crop" operation to assist with reasoning. The format of 
the operation is as follows:
{"bbox_2d": [x1, y1, x2, y2]}
This bounding box indicates the key region that needs to be focused 
on to correctly answer the question.
You must think step by step from the perspective of the respondent, 
using the "Crop" operation at appropriate moments in your reasoning 
process to eventually reach the correct answer. Important notes:
1. You must not modify the content or format of the "Crop" operation 
in any way.
2. In a real setting, the respondent only has access to the image and 
the question. This bounding box indicates the area where the correct 
answer information is located. In this task, they are provided to ensure 
the correctness of your reasoning process. When writing the reasoning, 
pretend you are the respondent who independently identifies when to use 
the "Crop" operation and how to reach the answer step by step.
3. Make sure the reasoning is fluent, logical, and concise.
4. Format of the reasoning process: <think>...</think><answer>...</answer>

Here is an example:
Question: Are there any black numbers or letters?
"Crop" operation: {"bbox_2d": [247, 384, 307, 444]}
Reasoning: <think>
Step 1: To determine if there are black numbers or letters, I need to 
focus on the text visible in the image. The dog is wearing a heart-shaped 
tag that has some text on it. I will crop and zoom in on the tag for a 
closer look at the text details. {"bbox_2d": [247, 384, 307, 444]}
Step 2: After cropping, I can see that the letters "G PLUS" are in red, 
and the numbers "6 223 13" are also in red. There are no black numbers 
or letters on the tag. Review the rest of the image, there are no black 
numbers or letters either.</think>
<answer>no</answer>

Question:{question}
"Crop" operation:{crop}
Now Output the reasoning process:)PROMPT";

const std::string_view kFilterRegion = R"PROMPT(You need to determine whether the content in a picture is a complete and
semantically meaningful visual unit. Please look carefully at this cropped
image and determine whether it contains a recognizable object, block of text,
or specific part of a diagram. If it is recognizable, answer 'yes'; if not,
answer 'no'.
Now output 'yes' or 'no' directly.)PROMPT";

const std::string_view kFilterReasoning = R"PROMPT(You need to make an in-depth assessment of this reasoning process. First,
determine whether its logic is rigorous and whether each step of reasoning leads
naturally and smoothly to the next; second, check whether the reasoning process
progresses gradually towards arriving at the final answer; and lastly, check
whether there is any false information or repetitive redundancy in the text
that is not relevant to the reasoning. If this textual reasoning meets the
requirements in terms of logic, advancement and content streamlining, output
'yes'; whenever one of these is not met, output 'no'.
{question}
{ground-truth answer}
{reasoning process}
Now output 'yes' or 'no' directly.)PROMPT";

namespace {

std::string fill_all(std::string_view tmpl,
                     const std::vector<std::pair<std::string_view, std::string_view>>& values) {
  std::string out;
  out.reserve(tmpl.size());
  std::size_t pos = 0;
  while (pos < tmpl.size()) {
    bool replaced = false;
    if (tmpl[pos] == '{') {
      for (const auto& [key, value] : values) {
        if (tmpl.compare(pos, key.size(), key) == 0) {
          out.append(value);
          pos += key.size();
          replaced = true;
          break;
        }
      }
    }
    if (!replaced) out.push_back(tmpl[pos++]);
  }
  return out;
}

}  // namespace

std::string fill(std::string_view tmpl, std::string_view placeholder, std::string_view value) {
  return fill_all(tmpl, {{placeholder, value}});
}

std::string render_construct_from_qa(std::string_view question) {
  return fill_all(kConstructFromQa, {{"{question}", question}});
}

std::string render_construct_from_bbox(std::string_view question, std::string_view crop) {
  return fill_all(kConstructFromBbox, {{"{question}", question}, {"{crop}", crop}});
}

std::string render_filter_reasoning(std::string_view question, std::string_view ground_truth,
                                    std::string_view rationale) {
  return fill_all(kFilterReasoning, {{"{question}", question},
                                     {"{ground-truth answer}", ground_truth},
                                     {"{reasoning process}", rationale}});
}

}  // namespace vlmr3::prompts
