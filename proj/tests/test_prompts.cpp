#include <vector>

#include <gtest/gtest.h>

#include "bmip/aggregation.hpp"
#include "bmip/prompts.hpp"
#include "bmip/verify/micro.hpp"

namespace bmip {
namespace {

using verify::make_micro_problem;

bool bit_identical(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    if (a.at(i) != b.at(i)) return false;
  }
  return true;
}

TEST(DeepPrompts, DepthZeroIsThePlainBackbone) {
  for (Strategy s : kAllStrategies) {
    auto p = make_micro_problem(s, 1, 2, 5);
    p.model.depth = 0;
    const Tensor words = embed_text(p.backbone, p.captions);
    const ImageEmbedding image = embed_image(p.backbone, p.images);
    const InteractiveOutput out = interactive_forward(p.backbone, p.model, words, image);
    EXPECT_TRUE(bit_identical(out.text.output, encode_text_plain(p.backbone, words))) << strategy_name(s);
    EXPECT_TRUE(bit_identical(out.vision.output, encode_image_plain(p.backbone, image))) << strategy_name(s);
  }
}

TEST(DeepPrompts, PromptSlotsSitWhereExpected) {
  auto p = make_micro_problem(Strategy::Independent, 2, 3, 1);
  const InteractiveOutput out =
      interactive_forward(p.backbone, p.model, embed_text(p.backbone, p.captions), embed_image(p.backbone, p.images));
  // Text order [P, W]; vision order [CLS, E, P] with m = 4 patches.
  for (const auto& keys : out.text.prompt_keys) EXPECT_EQ(keys, (std::vector<std::size_t>{0, 1, 2}));
  for (const auto& keys : out.vision.prompt_keys) EXPECT_EQ(keys, (std::vector<std::size_t>{5, 6, 7}));
  ASSERT_EQ(out.text.attention_maps.size(), 2u);
  EXPECT_EQ(out.text.attention_maps[0].shape(), (Shape{3, 2, 7, 7}));
  EXPECT_EQ(out.vision.attention_maps[0].shape(), (Shape{2, 2, 8, 8}));
  EXPECT_EQ(out.text.output.shape(), (Shape{3, 4, 8}));
  EXPECT_EQ(out.vision.output.shape(), (Shape{2, 8}));
}

TEST(DeepPrompts, DepthBeyondEncoderIsRejected) {
  auto p = make_micro_problem(Strategy::Independent, 2, 1, 1);
  const Tensor words = embed_text(p.backbone, p.captions);
  EXPECT_THROW(text_forward_with_prompts(p.backbone, words, PromptStack::initialize(Modality::Language, 3, 1, 8, 1)),
               ConfigError);
}

// Layers up to J drop the previous prompt outputs, so edits to those slots
// vanish; past J the slots flow on and edits propagate.
TEST(DeepPrompts, ReplacementDiscardsPreviousPromptOutputs) {
  auto run = [](std::size_t depth) {
    auto p = make_micro_problem(Strategy::Independent, depth, 1, 2);
    const Tensor words = embed_text(p.backbone, p.captions);
    ForwardHooks hooks;
    hooks.edit_output = [](std::size_t layer, const Tensor& out) {
      if (layer != 1) return out;
      Tensor bump = Tensor::zeros(out.shape());
      for (std::size_t n = 0; n < out.dim(0); ++n) bump.mutable_data()[n * out.dim(1) * out.dim(2)] = 5.0;
      return add(out, bump);  // slot 0 of each sequence is the prompt
    };
    const Tensor plain = text_forward_with_prompts(p.backbone, words, p.model.language).output;
    const Tensor edited = text_forward_with_prompts(p.backbone, words, p.model.language, hooks).output;
    return bit_identical(plain, edited);
  };
  EXPECT_TRUE(run(2));
  EXPECT_FALSE(run(1));
}

TEST(DeepPrompts, InitializationIsSeededAndSmall) {
  const auto a = PromptStack::initialize(Modality::Vision, 2, 3, 8, 9);
  const auto b = PromptStack::initialize(Modality::Vision, 2, 3, 8, 9);
  ASSERT_EQ(a.prompts.size(), 2u);
  EXPECT_EQ(a.parameter_count(), 2u * 3 * 8);
  EXPECT_TRUE(bit_identical(a.prompts[1], b.prompts[1]));
  for (double v : a.prompts[0].data()) EXPECT_LT(std::abs(v), 10 * kPromptInitStddev);
  EXPECT_TRUE(a.prompts[0].requires_grad());
}

}  // namespace
}  // namespace bmip
