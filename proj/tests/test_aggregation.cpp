#include <algorithm>
#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "bmip/aggregation.hpp"
#include "bmip/verify/micro.hpp"

namespace bmip {
namespace {

using verify::make_micro_problem;

double max_abs_diff(const Tensor& a, const Tensor& b) {
  EXPECT_EQ(a.shape(), b.shape());
  double worst = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(a.at(i) - b.at(i)));
  return worst;
}

TEST(Strategies, NamesRoundTrip) {
  for (Strategy s : kAllStrategies) EXPECT_EQ(parse_strategy(strategy_name(s)), s);
  EXPECT_THROW(parse_strategy("BMIP"), ConfigError);
  EXPECT_THROW(parse_strategy(""), ConfigError);
}

TEST(GatedMix, ConvexCombinationPerToken) {
  const Tensor own = Tensor::from({2, 2}, {1, 2, 3, 4});
  const Tensor other = Tensor::from({2, 2}, {-1, 0, 1, 0});
  const Tensor w = Tensor::from({2}, {0.25, 1.0});
  const Tensor out = gated_mix(own, other, w);
  const std::vector<double> expected = {0.25 * 1 - 0.75, 0.5, 3, 4};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(out.at(i), expected[i]);
}

TEST(GatedMix, PerSequenceWeightsAddBatchAxis) {
  const Tensor own = Tensor::from({1, 2}, {2, 4});
  const Tensor other = Tensor::from({1, 2}, {0, 0});
  const Tensor w = Tensor::from({2, 1}, {0.5, 0.0});
  const Tensor out = gated_mix(own, other, w);
  ASSERT_EQ(out.shape(), (Shape{2, 1, 2}));
  const std::vector<double> expected = {1, 2, 0, 0};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(out.at(i), expected[i]);
}

TEST(PromptAttention, MeanOverHeadsAndNonPromptQueries) {
  // One sequence, 2 heads, 3 tokens, prompt at key 0. Rows are queries.
  const Tensor map = Tensor::from({1, 2, 3, 3}, {
      0.9, 0.05, 0.05,  0.2, 0.5, 0.3,  0.4, 0.4, 0.2,    // head 0
      0.1, 0.8, 0.1,    0.6, 0.2, 0.2,  0.0, 0.5, 0.5});  // head 1
  const std::vector<std::size_t> keys = {0};
  const Tensor a = extract_prompt_attention(map, keys);
  ASSERT_EQ(a.shape(), (Shape{1, 1}));
  EXPECT_NEAR(a.at(0), (0.2 + 0.4 + 0.6 + 0.0) / 4, 1e-15);
}

TEST(PromptAttention, RejectsInvalidKeys) {
  const Tensor map = Tensor::full({1, 1, 2, 2}, 0.5);
  const std::vector<std::size_t> out_of_range = {2};
  EXPECT_THROW(extract_prompt_attention(map, out_of_range), std::invalid_argument);
  const std::vector<std::size_t> every_query = {0, 1};
  EXPECT_THROW(extract_prompt_attention(map, every_query), std::invalid_argument);
}

TEST(PromptAttention, BmipExtractsAtEveryInteractiveLayerBeyondTheFirst) {
  for (Strategy s : kAllStrategies) {
    auto p = make_micro_problem(s, 2, 1, 4);
    reset_extraction_count();
    interactive_forward(p.backbone, p.model, embed_text(p.backbone, p.captions), embed_image(p.backbone, p.images));
    EXPECT_EQ(extraction_count(), s == Strategy::Bmip ? 2u : 0u) << strategy_name(s);
  }
}

TEST(Reductions, IndependentIsTheIdentityOnPrompts) {
  auto p = make_micro_problem(Strategy::Independent, 2, 2, 6);
  const auto lang = language_source(p.model), vis = vision_source(p.model);
  for (std::size_t layer = 1; layer <= 2; ++layer) {
    PromptContext ctx;
    ctx.layer = layer;
    EXPECT_EQ(lang(ctx).node(), p.model.language.prompts[layer - 1].node());
    EXPECT_EQ(vis(ctx).node(), p.model.vision.prompts[layer - 1].node());
  }
}

TEST(Reductions, SaturatedGatesReduceBmipToIndependent) {
  for (std::uint64_t seed : {1, 2, 3}) {
    auto p = make_micro_problem(Strategy::Bmip, 2, 2, seed);
    saturate_gates(p.model, kSaturatedGateLogit);
    PromptModel independent = p.model.clone();
    independent.strategy = Strategy::Independent;
    const Tensor words = embed_text(p.backbone, p.captions);
    const ImageEmbedding image = embed_image(p.backbone, p.images);
    const auto a = interactive_forward(p.backbone, p.model, words, image);
    const auto b = interactive_forward(p.backbone, independent, words, image);
    EXPECT_LT(max_abs_diff(a.text.output, b.text.output), 1e-9);
    EXPECT_LT(max_abs_diff(a.vision.output, b.vision.output), 1e-9);
  }
}

TEST(Reductions, OpenGatesHandOverToTheOtherModality) {
  auto p = make_micro_problem(Strategy::Bmip, 1, 2, 8);
  saturate_gates(p.model, -kSaturatedGateLogit);
  const Tensor a = Tensor::full({2}, 0.1);
  const AggregatedPrompts out = bmip_aggregate(p.model, 1, a, a);
  const Tensor projected = p.model.interaction.language_head(1).apply(p.model.vision.prompts[0]);
  EXPECT_LT(max_abs_diff(out.language, projected), 1e-12);
}

TEST(PromptModel, ParameterSetsFollowTheStrategy) {
  auto count = [](Strategy s, const std::string& fragment) {
    const auto named = make_micro_problem(s, 2, 2, 1).model.named_parameters();
    return std::count_if(named.begin(), named.end(),
                         [&](const NamedTensor& t) { return t.first.find(fragment) != std::string::npos; });
  };
  EXPECT_EQ(count(Strategy::UniDirectional, "vision.prompt"), 0);
  EXPECT_EQ(count(Strategy::Independent, "interaction"), 0);
  EXPECT_GT(count(Strategy::Bmip, "gate"), 0);
  EXPECT_EQ(count(Strategy::Addition, "gate"), 0);

  const auto bmip = make_micro_problem(Strategy::Bmip, 2, 2, 1);
  EXPECT_EQ(bmip.model.prompt_parameter_count(), 2u * 2 * (8 + 8));
  const auto uni = make_micro_problem(Strategy::UniDirectional, 2, 2, 1);
  EXPECT_EQ(uni.model.prompt_parameter_count(), 2u * 2 * 8);
  for (const auto& [name, t] : bmip.model.named_parameters()) EXPECT_EQ(name.rfind("tunable/", 0), 0u) << name;
}

TEST(PromptModel, JointDoublesThePromptCount) {
  auto p = make_micro_problem(Strategy::Joint, 1, 2, 1);
  const AggregatedPrompts out = baseline_aggregate(p.model, 1);
  EXPECT_EQ(out.language.shape(), (Shape{4, 8}));
  EXPECT_EQ(out.vision.shape(), (Shape{4, 8}));
}

TEST(PromptModel, CloneIsDeep) {
  auto p = make_micro_problem(Strategy::Bmip, 1, 1, 1);
  const auto d = p.model.digest();
  PromptModel copy = p.model.clone();
  copy.language.prompts[0].mutable_data()[0] += 1.0;
  EXPECT_EQ(p.model.digest(), d);
  EXPECT_NE(copy.digest(), d);
}

}  // namespace
}  // namespace bmip
