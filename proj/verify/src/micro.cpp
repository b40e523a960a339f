#include "bmip/verify/micro.hpp"

#include "bmip/random.hpp"

namespace bmip::verify {

BackboneConfig micro_backbone_config() {
  BackboneConfig c;
  c.text = {.depth = 2, .width = 8, .heads = 2, .context_length = 4, .vocab_size = 8};
  c.vision = {.depth = 2, .width = 8, .heads = 2, .image_side = 4, .patch_size = 2, .channels = 3};
  c.shared_dim = 4;
  c.mlp_ratio = 2;
  return c;
}

MicroProblem make_micro_problem(Strategy strategy, std::size_t depth, std::size_t length, std::uint64_t seed) {
  const BackboneConfig config = micro_backbone_config();
  MicroProblem p{Backbone::initialize(config, seed),
                 PromptModel::initialize(config, strategy, depth, length, {}, seed), {}, {}};
  Rng rng(derive_seed(seed, 0x5EED));
  // Non-trivial LayerNorm affine parameters, so gain/bias paths matter.
  for (auto& [name, t] : p.backbone.params.named_parameters()) {
    if (name.find("gain") != std::string::npos || name.find("bias") != std::string::npos) {
      Tensor h = t;
      for (double& v : h.mutable_data()) v += rng.normal(0.0, 0.1);
    }
  }
  for (auto& [name, t] : p.model.named_parameters()) {
    Tensor h = t;
    const bool prompt = name.find("prompt") != std::string::npos;
    const bool gate = name.find("gate") != std::string::npos;
    for (double& v : h.mutable_data()) v = prompt ? v * 25.0 : v + rng.normal(0.0, gate ? 0.5 : 0.1);
  }
  p.captions = {{1, 2, 5, 0}, {1, 3, 6, 7}, {4, 5, 0, 0}};
  for (int i = 0; i < 2; ++i) {
    Image img{config.vision.image_side, config.vision.channels, {}};
    img.pixels.resize(img.side * img.side * img.channels);
    for (double& v : img.pixels) v = rng.uniform();
    p.images.push_back(std::move(img));
  }
  return p;
}

}  // namespace bmip::verify
