#pragma once

#include <memory>
#include <string>

#include "vlmr3/backend.hpp"
#include "vlmr3/prompts.hpp"
#include "vlmr3/toy.hpp"
#include "vlmr3/vision.hpp"

namespace vlmr3::fixtures {

// Deterministic gray ramp so crops of different regions differ.
inline Image ramp_image(int width, int height) {
  Image img(width, height, 1);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) img.at(x, y) = static_cast<std::uint8_t>((x * 7 + y * 13) % 256);
  return img;
}

inline std::shared_ptr<const EpisodeInput> ramp_input(int width, int height, std::string id = "q0") {
  auto in = std::make_shared<EpisodeInput>();
  in->question_id = std::move(id);
  in->image = vision::normalize_pixels(ramp_image(width, height));
  in->question = "What is shown?";
  in->system_prompt = std::string(prompts::kSystemInstruction);
  return in;
}

inline std::shared_ptr<const EpisodeInput> toy_input(const toy::Sample& s) {
  return std::make_shared<EpisodeInput>(toy::make_input(s, std::string(prompts::kSystemInstruction)));
}

}  // namespace vlmr3::fixtures
