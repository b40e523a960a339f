#include <vector>

#include <benchmark/benchmark.h>

#include "bmip/random.hpp"
#include "bmip/tensor.hpp"

namespace {

using namespace bmip;

Tensor random_tensor(Shape shape, std::uint64_t seed, bool requires_grad = false) {
  Rng rng(seed);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.normal(0.0, 1.0);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor a = random_tensor({32, n, n}, 1), b = random_tensor({n, n}, 2);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b).data().data());
  state.SetItemsProcessed(state.iterations() * 32 * n * n * n);
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(48)->Arg(128);

void BM_MatmulBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Tensor a = random_tensor({32, n, n}, 1, true), b = random_tensor({n, n}, 2, true);
  for (auto _ : state) {
    sum(matmul(a, b)).backward();
    a.zero_grad();
    b.zero_grad();
  }
}
BENCHMARK(BM_MatmulBackward)->Arg(32)->Arg(48);

void BM_Softmax(benchmark::State& state) {
  const Tensor x = random_tensor({16, 4, 18, 18}, 3);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(softmax(x, 3).data().data());
}
BENCHMARK(BM_Softmax);

void BM_LayerNorm(benchmark::State& state) {
  const Tensor x = random_tensor({16, 18, 48}, 4), g = random_tensor({48}, 5), b = random_tensor({48}, 6);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(layer_norm(x, g, b).data().data());
}
BENCHMARK(BM_LayerNorm);

void BM_Attention(benchmark::State& state) {
  const auto tokens = static_cast<std::size_t>(state.range(0));
  const std::size_t d = 48;
  AttentionWeights w{random_tensor({d, d}, 1), random_tensor({d}, 2), random_tensor({d, d}, 3),
                     random_tensor({d}, 4), random_tensor({d, d}, 5), random_tensor({d}, 6),
                     random_tensor({d, d}, 7), random_tensor({d}, 8)};
  const Tensor x = random_tensor({16, tokens, d}, 9);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(multi_head_attention(x, x, x, w, 4).output.data().data());
}
BENCHMARK(BM_Attention)->Arg(10)->Arg(19)->Arg(40);

}  // namespace

BENCHMARK_MAIN();
