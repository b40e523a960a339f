#include <vector>

#include <benchmark/benchmark.h>

#include "bmip/aggregation.hpp"
#include "bmip/synth_data.hpp"
#include "bmip/train_eval.hpp"

namespace {

using namespace bmip;

struct Fixture {
  Backbone backbone;
  SyntheticDataset data;
  std::vector<Image> images;

  Fixture() : backbone(Backbone::initialize(BackboneConfig{}, 1)), data(generate(SyntheticSpec{})) {
    for (std::size_t i = 0; i < 16; ++i) images.push_back(data.test[i].image);
  }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

void BM_PlainImageEncoder(benchmark::State& state) {
  const Fixture& f = fixture();
  NoGradGuard guard;
  for (auto _ : state) {
    benchmark::DoNotOptimize(encode_image_plain(f.backbone, embed_image(f.backbone, f.images)).data().data());
  }
  state.SetItemsProcessed(state.iterations() * f.images.size());
}
BENCHMARK(BM_PlainImageEncoder);

// Full prompted forward over 16 images and every class caption.
void BM_PromptedForward(benchmark::State& state) {
  const Fixture& f = fixture();
  const auto strategy = static_cast<Strategy>(state.range(0));
  const PromptModel model = PromptModel::initialize(f.backbone.config, strategy, 3, 2, {}, 1);
  NoGradGuard guard;
  for (auto _ : state) {
    const Tensor z = prompted_class_features(f.backbone, model, f.data.class_captions);
    const Tensor x = prompted_image_features(f.backbone, model, f.images);
    benchmark::DoNotOptimize(classify(x, z, f.backbone.temperature()).data().data());
  }
  state.SetLabel(std::string(strategy_name(strategy)));
}
BENCHMARK(BM_PromptedForward)
    ->Arg(static_cast<int>(Strategy::Independent))
    ->Arg(static_cast<int>(Strategy::Bmip))
    ->Arg(static_cast<int>(Strategy::Joint));

void BM_TuningStep(benchmark::State& state) {
  const Fixture& f = fixture();
  const LabelSpace space = LabelSpace::all(f.data);
  std::vector<LabeledExample> batch(f.data.train.begin(), f.data.train.begin() + 16);
  TrainConfig config;
  config.epochs = 1;
  config.batch_size = 16;
  for (auto _ : state) {
    PromptModel model = PromptModel::initialize(f.backbone.config, Strategy::Bmip, 3, 2, {}, 1);
    benchmark::DoNotOptimize(tune_prompts(f.backbone, std::move(model), batch, space, config).digest());
  }
}
BENCHMARK(BM_TuningStep)->Unit(benchmark::kMillisecond);

}  // namespace
