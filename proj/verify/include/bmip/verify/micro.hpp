#pragma once

#include <cstdint>
#include <vector>

#include "bmip/aggregation.hpp"
#include "bmip/backbone.hpp"

namespace bmip::verify {

/// K = 2 encoders of width 8 with 2 heads, 4-token captions and 4x4 images
/// cut into m = 4 patches. Small enough for exhaustive finite differences.
BackboneConfig micro_backbone_config();

/// A micro backbone, a prompt model for `strategy`, and inputs, all drawn
/// from `seed`. Prompts are scaled up from their init so every path carries
/// signal, and gates and biases are jittered off their init values.
struct MicroProblem {
  Backbone backbone;
  PromptModel model;
  std::vector<Caption> captions;
  std::vector<Image> images;
};

MicroProblem make_micro_problem(Strategy strategy, std::size_t depth, std::size_t length, std::uint64_t seed);

}  // namespace bmip::verify
