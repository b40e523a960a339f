#include <algorithm>
#include <cmath>
#include <memory>
#include <vector>

#include <gtest/gtest.h>

#include "bmip/verify/gradcheck.hpp"
#include "bmip/verify/micro.hpp"
#include "bmip/verify/oracle.hpp"

namespace bmip::verify {
namespace {

// y = 2x with a backward that claims dy/dx = 3.
Tensor doubled_with_wrong_gradient(const Tensor& x) {
  auto node = std::make_shared<detail::Node>();
  node->shape = x.shape();
  for (double v : x.data()) node->value.push_back(2 * v);
  node->requires_grad = x.requires_grad();
  node->inputs = {x.node()};
  node->backward = [](detail::Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += 3 * self.grad[i];
  };
  return Tensor(node);
}

TEST(Gradcheck, RelativeErrorUsesTheNormFloor) {
  const std::vector<double> a = {1e-9, 0}, n = {0, 0};
  EXPECT_NEAR(relative_error(a, n), 1e-9 / kGradientNormFloor, 1e-20);
  const std::vector<double> b = {3, 4}, m = {3, 4.5};
  EXPECT_NEAR(relative_error(b, m), 0.5 / std::hypot(3.0, 4.5), 1e-15);
}

TEST(Gradcheck, AcceptsCorrectOpsAndCatchesWrongBackward) {
  Tensor x = Tensor::from({3}, {0.3, -1.2, 2.0}, true);
  const auto good = check_gradients("gelu", 1, [&] { return gelu(x); }, {x});
  EXPECT_TRUE(good.passed()) << good.max_relative_error;
  EXPECT_EQ(good.coordinates, 3u);
  const auto bad = check_gradients("wrong", 1, [&] { return doubled_with_wrong_gradient(x); }, {x});
  EXPECT_FALSE(bad.passed());
  EXPECT_NEAR(bad.max_relative_error, 1.0 / 3.0, 1e-6);
}

TEST(Gradcheck, InteractiveForwardOnOneSeed) {
  const auto p = make_micro_problem(Strategy::Bmip, 1, 1, 2);
  std::vector<Tensor> inputs;
  for (const auto& [name, t] : p.model.named_parameters()) inputs.push_back(t);
  const auto c = check_gradients("bmip", 2, [&] {
    return prompted_image_features(p.backbone, p.model, p.images);
  }, inputs);
  EXPECT_TRUE(c.passed()) << c.max_relative_error;
}

TEST(Oracle, AgreesOnEveryStrategy) {
  const std::vector<std::uint64_t> seeds = {4};
  const auto cases = run_oracle_suite(seeds);
  EXPECT_EQ(cases.size(), std::size(kAllStrategies) * 2);
  for (const auto& c : cases) EXPECT_TRUE(c.passed()) << strategy_name(c.strategy) << " J=" << c.depth;
}

TEST(Oracle, DetectsAPerturbedModel) {
  auto p = make_micro_problem(Strategy::Bmip, 2, 1, 5);
  const OracleOutput before = naive_forward(p.backbone, p.model, p.captions, p.images);
  p.model.interaction.vision_gates[0].bias.mutable_data()[0] += 1e-6;
  const OracleOutput after = naive_forward(p.backbone, p.model, p.captions, p.images);
  double diff = 0;
  for (std::size_t i = 0; i < before.image_features.size(); ++i) {
    diff = std::max(diff, std::abs(before.image_features[i] - after.image_features[i]));
  }
  EXPECT_GT(diff, kOracleTolerance);
}

}  // namespace
}  // namespace bmip::verify
