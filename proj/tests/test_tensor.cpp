#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "bmip/tensor.hpp"

namespace bmip {
namespace {

// Expected values computed independently with numpy (float64).
const std::vector<double> kInput = {0.5, -1.25, 2.0, 3.0, 0.0, -0.75};

void expect_values(const Tensor& t, const std::vector<double>& expected, double tol) {
  ASSERT_EQ(t.numel(), expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(t.at(i), expected[i], tol) << "entry " << i;
}

TEST(TensorOps, SoftmaxMatchesReference) {
  const Tensor x = Tensor::from({2, 3}, kInput);
  expect_values(softmax(x, 1),
                {0.17682018210744427, 0.03072674032643643, 0.7924530775661193, 0.9317017745076629,
                 0.04638669994587317, 0.02191152554646392},
                1e-15);
}

TEST(TensorOps, SoftmaxIsShiftInvariantAndStable) {
  const Tensor x = Tensor::from({1, 3}, {1000.0, 1001.0, 999.0});
  const Tensor y = Tensor::from({1, 3}, {0.0, 1.0, -1.0});
  const Tensor a = softmax(x, 1), b = softmax(y, 1);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(a.at(i), b.at(i), 1e-15);
}

TEST(TensorOps, SoftmaxRejectsNonFinite) {
  const Tensor x = Tensor::from({1, 2}, {0.0, std::nan("")});
  EXPECT_THROW(softmax(x, 1), std::domain_error);
}

TEST(TensorOps, LayerNormMatchesReference) {
  const Tensor x = Tensor::from({2, 3}, kInput);
  const Tensor gain = Tensor::from({3}, {1.5, -0.5, 2.0});
  const Tensor bias = Tensor::from({3}, {0.1, 0.2, -0.3});
  expect_values(layer_norm(x, gain, bias),
                {0.19411810397962603, 0.8274540265308403, 2.0843253008171936, 2.1830912566991496,
                 0.43145458407768333, -2.1516366726214664},
                1e-14);
}

TEST(TensorOps, GeluMatchesTanhApproximation) {
  const Tensor x = Tensor::from({2, 3}, kInput);
  expect_values(gelu(x),
                {0.34571400982514394, -0.13228579703028542, 1.954597694087775, 2.996362607918227, 0.0,
                 -0.17003944483437972},
                1e-15);
}

TEST(TensorOps, CrossEntropyMatchesReference) {
  const Tensor x = Tensor::from({2, 3}, kInput);
  const std::vector<int> labels = {2, 0};
  EXPECT_NEAR(cross_entropy(x, labels).item(), 0.1516822415191796, 1e-15);
}

TEST(TensorOps, SoftCrossEntropyWithOneHotEqualsHard) {
  const Tensor x = Tensor::from({2, 3}, kInput);
  const std::vector<double> targets = {0, 0, 1, 1, 0, 0};
  const std::vector<int> labels = {2, 0};
  EXPECT_NEAR(soft_cross_entropy(x, targets).item(), cross_entropy(x, labels).item(), 1e-15);
}

TEST(TensorOps, MatmulMatchesReference) {
  const Tensor a = Tensor::from({2, 3}, {0, 0.25, 0.5, 0.75, 1.0, 1.25});
  const Tensor w = Tensor::from({3, 2}, {1, 2, -1, 0.5, 0.25, -3});
  expect_values(matmul(a, w), {-0.125, -1.375, 0.0625, -1.75}, 1e-15);
  const Tensor wt = permute(w, std::vector<std::size_t>{1, 0});
  expect_values(matmul(a, wt, true), {-0.125, -1.375, 0.0625, -1.75}, 1e-15);
}

TEST(TensorOps, BatchedMatmulAgreesWithPerBatch) {
  const Tensor a = Tensor::from({2, 1, 2}, {1, 2, 3, 4});
  const Tensor b = Tensor::from({2, 2, 1}, {5, 6, 7, 8});
  expect_values(matmul(a, b), {17, 53}, 0);
}

TEST(TensorOps, BroadcastFollowsFirstOperand) {
  const Tensor a = Tensor::from({2, 3}, kInput);
  const Tensor row = Tensor::from({3}, {1, 2, 3});
  expect_values(add(a, row), {1.5, 0.75, 5.0, 4.0, 2.0, 2.25}, 0);
  EXPECT_THROW(add(row, a), ShapeError);
  EXPECT_THROW(add(a, Tensor::from({2}, {1, 2})), ShapeError);
}

TEST(TensorOps, ShapeErrorNamesBothShapes) {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 5}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("[2x3]"), std::string::npos) << what;
    EXPECT_NE(what.find("[4x5]"), std::string::npos) << what;
  }
}

TEST(TensorOps, ConcatSliceRoundTrip) {
  const Tensor a = Tensor::from({2, 3}, kInput);
  const Tensor left = slice(a, 1, 0, 1), right = slice(a, 1, 1, 3);
  const Tensor back = concat({left, right}, 1);
  EXPECT_EQ(back.shape(), a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(back.at(i), a.at(i));
}

TEST(TensorOps, PermuteAndIndexSelect) {
  const Tensor a = Tensor::from({2, 3}, kInput);
  expect_values(permute(a, std::vector<std::size_t>{1, 0}), {0.5, 3.0, -1.25, 0.0, 2.0, -0.75}, 0);
  const std::vector<std::size_t> idx = {2, 0};
  expect_values(index_select(a, 1, idx), {2.0, 0.5, -0.75, 3.0}, 0);
}

TEST(TensorOps, ReductionsOverAxes) {
  const Tensor a = Tensor::from({2, 3}, kInput);
  EXPECT_DOUBLE_EQ(sum(a).item(), 3.5);
  expect_values(sum(a, 0), {3.5, -1.25, 1.25}, 1e-15);
  expect_values(mean(a, 1), {1.25 / 3, 2.25 / 3}, 1e-15);
}

TEST(TensorOps, L2NormalizeRejectsZeroRows) {
  EXPECT_THROW(l2_normalize(Tensor::zeros({1, 3})), std::domain_error);
  const Tensor n = l2_normalize(Tensor::from({1, 2}, {3, 4}));
  expect_values(n, {0.6, 0.8}, 1e-16);
}

TEST(TensorOps, EmbeddingRejectsOutOfRange) {
  const Tensor table = Tensor::zeros({4, 2});
  const std::vector<int> bad = {4};
  EXPECT_THROW(embedding(table, bad), std::out_of_range);
}

TEST(Autodiff, GradientsAccumulateAcrossUses) {
  Tensor x = Tensor::from({2}, {1.5, -2.0}, true);
  const Tensor y = sum(add(mul(x, x), x));  // d/dx = 2x + 1
  y.backward();
  const auto g = x.grad();
  EXPECT_DOUBLE_EQ(g[0], 4.0);
  EXPECT_DOUBLE_EQ(g[1], -3.0);
}

TEST(Autodiff, ZeroGradClearsState) {
  Tensor x = Tensor::from({1}, {2.0}, true);
  sum(scale(x, 3.0)).backward();
  x.zero_grad();
  EXPECT_FALSE(x.has_grad());
  EXPECT_EQ(x.grad(), std::vector<double>{0.0});
}

TEST(Autodiff, NoGradGuardSkipsGraph) {
  Tensor x = Tensor::from({1}, {2.0}, true);
  {
    NoGradGuard guard;
    EXPECT_FALSE(grad_enabled());
    EXPECT_FALSE(scale(x, 2.0).requires_grad());
  }
  EXPECT_TRUE(grad_enabled());
  EXPECT_TRUE(scale(x, 2.0).requires_grad());
}

TEST(Autodiff, BackwardRequiresScalar) {
  Tensor x = Tensor::from({2}, {1.0, 2.0}, true);
  EXPECT_THROW(scale(x, 2.0).backward(), std::invalid_argument);
}

TEST(Autodiff, TapeVisitsEachNodeOnce) {
  Tensor x = Tensor::from({1}, {1.0}, true);
  const Tensor h = exp(x);
  const Tensor y = sum(add(h, h));  // diamond through h
  const GradTape tape(y);
  EXPECT_EQ(tape.size(), 4u);
  y.backward();
  EXPECT_NEAR(x.grad()[0], 2 * std::exp(1.0), 1e-15);
}

TEST(Attention, RowsOfMapAreDistributions) {
  const std::size_t d = 4;
  AttentionWeights w;
  auto eye = [&] {
    std::vector<double> v(d * d, 0.0);
    for (std::size_t i = 0; i < d; ++i) v[i * d + i] = 1.0;
    return Tensor::from({d, d}, v);
  };
  w.wq = eye(), w.wk = eye(), w.wv = eye(), w.wo = eye();
  w.bq = w.bk = w.bv = w.bo = Tensor::zeros({d});
  const Tensor x = Tensor::from({1, 3, d}, {1, 0, 0, 1, 0, 1, 1, 0, -1, 0, 2, 0});
  const AttentionResult r = multi_head_attention(x, x, x, w, 2);
  EXPECT_EQ(r.attention_map.shape(), (Shape{1, 2, 3, 3}));
  for (std::size_t row = 0; row < 6; ++row) {
    double s = 0;
    for (std::size_t k = 0; k < 3; ++k) s += r.attention_map.at(row * 3 + k);
    EXPECT_NEAR(s, 1.0, 1e-15);
  }
}

TEST(Attention, HeadsMustDivideWidth) {
  AttentionWeights w;
  w.wq = w.wk = w.wv = w.wo = Tensor::zeros({3, 3});
  w.bq = w.bk = w.bv = w.bo = Tensor::zeros({3});
  const Tensor x = Tensor::zeros({1, 2, 3});
  EXPECT_THROW(multi_head_attention(x, x, x, w, 2), std::invalid_argument);
}

}  // namespace
}  // namespace bmip
