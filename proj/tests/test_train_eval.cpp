#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "bmip/train_eval.hpp"
#include "bmip/verify/micro.hpp"

namespace bmip {
namespace {

TEST(HarmonicMean, ExactValuesAndLaws) {
  EXPECT_EQ(harmonic_mean(0.5, 0.5), 0.5);
  EXPECT_EQ(harmonic_mean(0.8, 0.0), 0.0);
  EXPECT_EQ(harmonic_mean(0.0, 0.3), 0.0);
  EXPECT_NEAR(harmonic_mean(0.6, 0.3), 0.4, 1e-15);
  EXPECT_NEAR(harmonic_mean(0.9, 0.1), 0.18, 1e-15);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 1000; ++i) {
    const double a = u(rng), b = u(rng);
    EXPECT_NEAR(harmonic_mean(a, a), a, 1e-12);
    EXPECT_EQ(harmonic_mean(a, b), harmonic_mean(b, a));
    EXPECT_LE(harmonic_mean(a, b), 0.5 * (a + b) + 1e-15);
    EXPECT_GE(harmonic_mean(a, b), std::min(a, b) - 1e-15);
  }
}

TEST(Accuracy, CountsAndRejectsEmpty) {
  const std::vector<int> p = {1, 2, 3, 4}, y = {1, 0, 3, 0};
  EXPECT_EQ(accuracy(p, y), 0.5);
  EXPECT_THROW(accuracy(std::vector<int>{}, std::vector<int>{}), std::invalid_argument);
  const std::vector<double> v = {0.2, 0.7, 0.7, 0.1};
  EXPECT_EQ(argmax(v), 1u);
}

TEST(OpenWorld, PooledAccuracyIsSizeWeightedMean) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t nb = 1 + rng() % 40, nn = 1 + rng() % 40;
    std::vector<int> bp(nb), bl(nb), np(nn), nl(nn);
    for (std::size_t i = 0; i < nb; ++i) bl[i] = static_cast<int>(rng() % 3), bp[i] = static_cast<int>(rng() % 6);
    for (std::size_t i = 0; i < nn; ++i) nl[i] = 3 + static_cast<int>(rng() % 3), np[i] = static_cast<int>(rng() % 6);
    const OpenWorldResult r = score_open_world(bp, bl, np, nl);
    const double weighted = (r.base_acc * nb + r.new_acc * nn) / static_cast<double>(nb + nn);
    EXPECT_NEAR(r.open_world_acc, weighted, 1e-12);
    EXPECT_EQ(r.hm, harmonic_mean(r.base_acc, r.new_acc));
  }
}

TEST(OpenWorld, OverlappingClassSetsAreRejected) {
  const std::vector<int> p = {0}, b = {1}, n = {1};
  EXPECT_THROW(score_open_world(p, b, p, n), std::invalid_argument);
}

TEST(Summaries, SampleStandardDeviation) {
  const std::vector<double> v = {1, 2, 3, 4};
  const Summary s = summarize(v);
  EXPECT_EQ(s.mean, 2.5);
  EXPECT_NEAR(s.stddev, std::sqrt(5.0 / 3.0), 1e-15);
  EXPECT_EQ(summarize(std::vector<double>{0.3}).stddev, 0.0);
}

TEST(Summaries, PercentFormattingRoundsHalfUp) {
  EXPECT_EQ(format_percent(0.12345), "12.35");
  EXPECT_EQ(format_percent(0.5), "50.00");
  EXPECT_EQ(format_percent(0.0), "0.00");
  EXPECT_EQ(format_percent(0.99994), "99.99");
  EXPECT_EQ(format_percent(0.99995), "100.00");
}

SeedRecord record(std::uint64_t seed, const std::string& strategy, double hm) {
  SeedRecord r;
  r.seed = seed;
  r.strategy = strategy;
  r.config_digest = "00000000000000aa";
  r.metrics["open_world.hm"] = hm;
  return r;
}

TEST(Reports, SeedRecordRoundTripsExactly) {
  SeedRecord r = record(3, "bmip", 0.1 + 0.2);
  r.metrics["train.final_loss"] = 1.0 / 3.0;
  r.backbone_digest = "abc";
  const SeedRecord back = SeedRecord::from_text(r.to_text());
  EXPECT_EQ(back.to_text(), r.to_text());
  EXPECT_EQ(back.metrics.at("open_world.hm"), 0.1 + 0.2);
}

TEST(Reports, RefuseMixedRecords) {
  EXPECT_THROW(EvalReport::from_records({}), std::invalid_argument);
  EXPECT_THROW(EvalReport::from_records({record(1, "bmip", 0.5), record(2, "joint", 0.5)}), std::invalid_argument);
  SeedRecord other = record(2, "bmip", 0.5);
  other.config_digest = "00000000000000bb";
  EXPECT_THROW(EvalReport::from_records({record(1, "bmip", 0.5), other}), std::invalid_argument);
}

TEST(Reports, JsonRoundTripAndSortedKeys) {
  const EvalReport r = EvalReport::from_records({record(1, "bmip", 0.5), record(2, "bmip", 0.7)});
  EXPECT_NEAR(r.summaries.at("open_world.hm").mean, 0.6, 1e-15);
  const std::string text = r.to_text();
  EXPECT_EQ(EvalReport::from_text(text).to_text(), text);
  EXPECT_LT(text.find("\"config_digest\""), text.find("\"strategy\""));
}

TEST(Reports, DirectionalCheckUsesPooledStandardError) {
  const EvalReport lead =
      EvalReport::from_records({record(1, "bmip", 1), record(2, "bmip", 2), record(3, "bmip", 3)});
  const EvalReport rival = EvalReport::from_records(
      {record(1, "independent", 0), record(2, "independent", 0), record(3, "independent", 3)});
  // Variances 1 and 3, pooled 2; SE = sqrt(2) sqrt(2/3).
  const DirectionalCheck c = directional_check(lead, rival, "open_world.hm");
  EXPECT_NEAR(c.margin, 1.0, 1e-15);
  EXPECT_NEAR(c.pooled_se, std::sqrt(4.0 / 3.0), 1e-15);
  EXPECT_FALSE(c.met());
  EXPECT_NE(c.describe().find("not met"), std::string::npos);
  EXPECT_THROW(directional_check(lead, rival, "missing"), std::invalid_argument);
  const EvalReport single = EvalReport::from_records({record(1, "bmip", 1)});
  EXPECT_THROW(directional_check(single, rival, "open_world.hm"), std::invalid_argument);
}

TEST(Reports, TablesShowFlags) {
  EvalReport r = EvalReport::from_records({record(1, "bmip", 0.5), record(2, "bmip", 0.7)});
  r.flags.push_back("something unmet");
  const std::string t = render_tables({r});
  EXPECT_NE(t.find("bmip"), std::string::npos);
  EXPECT_NE(t.find("FLAG [bmip] something unmet"), std::string::npos);
}

struct MicroTask {
  verify::MicroProblem problem;
  std::vector<LabeledExample> examples;
  LabelSpace space;
};

MicroTask micro_task(Strategy s) {
  MicroTask t{verify::make_micro_problem(s, 2, 1, 4), {}, {}};
  t.space.classes = {0, 1, 2};
  t.space.captions = t.problem.captions;
  for (std::size_t i = 0; i < 6; ++i) {
    Image img = t.problem.images[i % 2];
    for (double& v : img.pixels) v = std::fmod(v + 0.13 * i, 1.0);
    t.examples.push_back({img, t.problem.captions[i % 3], static_cast<int>(i % 3)});
  }
  return t;
}

TEST(Tuning, OnlyPromptSideParametersMove) {
  MicroTask t = micro_task(Strategy::Bmip);
  const auto frozen = t.problem.backbone.params.digest();
  const auto before = t.problem.model.digest();
  TrainConfig c;
  c.epochs = 3;
  c.batch_size = 3;
  c.seed = 1;
  TrainLog log;
  const PromptModel tuned = tune_prompts(t.problem.backbone, t.problem.model.clone(), t.examples, t.space, c, &log);
  EXPECT_EQ(t.problem.backbone.params.digest(), frozen);
  EXPECT_NE(tuned.digest(), before);
  EXPECT_EQ(log.epoch_losses.size(), 3u);
  EXPECT_EQ(log.steps, 6u);
  EXPECT_NEAR(log.initial_loss, training_loss(t.problem.backbone, t.problem.model, t.examples, t.space), 1e-12);
  EXPECT_NEAR(log.final_loss, training_loss(t.problem.backbone, tuned, t.examples, t.space), 1e-12);
}

TEST(Tuning, DeterministicInSeed) {
  MicroTask t = micro_task(Strategy::Joint);
  TrainConfig c;
  c.epochs = 2;
  c.batch_size = 4;
  c.seed = 3;
  const auto a = tune_prompts(t.problem.backbone, t.problem.model.clone(), t.examples, t.space, c);
  const auto b = tune_prompts(t.problem.backbone, t.problem.model.clone(), t.examples, t.space, c);
  EXPECT_EQ(a.digest(), b.digest());
}

TEST(Tuning, InvalidConfigNamesTheField) {
  TrainConfig c;
  c.batch_size = 0;
  try {
    c.validate();
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("batch_size"), std::string::npos) << e.what();
  }
}

TEST(Tuning, ContinuationRefinesWithSmallerSteps) {
  TrainConfig c;
  const TrainConfig k = continuation_config(c);
  EXPECT_NEAR(k.learning_rate, c.learning_rate * 0.1, 1e-15);
  EXPECT_EQ(k.epochs, 5u);
  EXPECT_EQ(k.seed, c.seed);
  EXPECT_EQ(k.batch_size, c.batch_size);
}

TEST(Predict, LabelsComeFromTheLabelSpace) {
  MicroTask t = micro_task(Strategy::Independent);
  t.space.classes = {7, 3, 9};
  const std::vector<Image> images = {t.problem.images[0], t.problem.images[1]};
  for (int label : predict(t.problem.backbone, t.problem.model, images, t.space)) {
    EXPECT_TRUE(label == 7 || label == 3 || label == 9) << label;
  }
  EXPECT_THROW(t.space.index_of(0), std::invalid_argument);
  EXPECT_EQ(t.space.index_of(9), 2u);
}


TEST(HarmonicMean, WorkedExample) { EXPECT_NEAR(harmonic_mean(0.8, 0.7), 1.12 / 1.5, 1e-15); }

TEST(OpenWorld, EqualSizedSubsetsPoolToThePlainMean) {
  const std::vector<int> bp = {0, 1, 1, 0}, bl = {0, 1, 0, 0}, np = {2, 3, 0, 0}, nl = {2, 2, 3, 3};
  const OpenWorldResult r = score_open_world(bp, bl, np, nl);
  EXPECT_EQ(r.open_world_acc, (r.base_acc + r.new_acc) / 2);
  EXPECT_EQ(r.per_class.at(0), 2.0 / 3.0);
}

TEST(Accuracy, RandomLogitsScoreChance) {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<int> predicted, labels;
  for (int i = 0; i < 10000; ++i) {
    const std::vector<double> logits = {u(rng), u(rng), u(rng), u(rng)};
    predicted.push_back(static_cast<int>(argmax(logits)));
    labels.push_back(static_cast<int>(rng() % 4));
  }
  EXPECT_NEAR(accuracy(predicted, labels), 0.25, 0.02);
}

// A one-layer backbone matched to a small synthetic world.
struct Protocols : ::testing::Test {
  static void SetUpTestSuite() {
    SyntheticSpec spec;
    spec.classes = 6;
    spec.train_shots = 4;
    spec.test_per_class = 8;
    spec.image_side = 8;
    spec.vocab_size = 16;
    spec.caption_length = 6;
    spec.seed = 2;
    data = new SyntheticDataset(generate(spec));
    BackboneConfig c;
    c.text = {.depth = 2, .width = 8, .heads = 2, .context_length = 6, .vocab_size = 16};
    c.vision = {.depth = 2, .width = 8, .heads = 2, .image_side = 8, .patch_size = 4, .channels = 3};
    c.shared_dim = 8;
    c.mlp_ratio = 2;
    backbone = new Backbone(Backbone::initialize(c, 2));
  }
  static void TearDownTestSuite() {
    delete data;
    delete backbone;
  }
  static PromptModel model(Strategy s = Strategy::Bmip) {
    return PromptModel::initialize(backbone->config, s, 1, 2, {}, 3);
  }
  static TrainConfig config() {
    TrainConfig c;
    c.epochs = 4;
    c.batch_size = 6;
    c.seed = 5;
    c.depth = 1;
    return c;
  }
  static inline SyntheticDataset* data = nullptr;
  static inline Backbone* backbone = nullptr;
};

TEST_F(Protocols, ZeroLearningRateIsAFixedPoint) {
  TrainConfig c = config();
  c.learning_rate = 0.0;
  const PromptModel init = model();
  const PromptModel tuned = tune_prompts(*backbone, init.clone(), data->train, LabelSpace::all(*data), c);
  EXPECT_EQ(tuned.digest(), init.digest());
  const auto split = split_base_new(*data, 0.5);
  EXPECT_EQ(eval_open_world(*backbone, tuned, *data, split).hm, eval_open_world(*backbone, init, *data, split).hm);
}

TEST_F(Protocols, TuningLowersTheTrainingLoss) {
  TrainLog log;
  const auto split = split_base_new(*data, 0.5);
  tune_prompts(*backbone, model(), select_classes(data->train, split.base), LabelSpace::of(*data, split.base),
               config(), &log);
  EXPECT_LE(log.final_loss, log.initial_loss);
}

TEST_F(Protocols, SingleClassLossCollapses) {
  const std::vector<int> only = {0};
  TrainLog log;
  tune_prompts(*backbone, model(), select_classes(data->train, only), LabelSpace::of(*data, only), config(), &log);
  EXPECT_EQ(log.final_loss, 0.0);
}

TEST_F(Protocols, OpenWorldBaseAccuracyNeverExceedsClosedSet) {
  for (std::uint64_t seed : {1, 2, 3}) {
    const PromptModel m = PromptModel::initialize(backbone->config, Strategy::Bmip, 1, 2, {}, seed);
    const auto split = split_base_new(*data, 0.5);
    const OpenWorldResult ow = eval_open_world(*backbone, m, *data, split);
    const double closed =
        eval_closed(*backbone, m, select_classes(data->test, split.base), LabelSpace::of(*data, split.base));
    EXPECT_LE(ow.base_acc, closed);
    EXPECT_EQ(ow.base_count + ow.new_count, data->test.size());
  }
}

TEST_F(Protocols, CrossDatasetOnTheSourceIsSourceAccuracy) {
  const PromptModel m = model();
  const auto accs = eval_cross_dataset(*backbone, m, {*data});
  ASSERT_EQ(accs.size(), 1u);
  EXPECT_EQ(accs[0], eval_closed(*backbone, m, data->test, LabelSpace::all(*data)));
}

TEST_F(Protocols, DomainShiftOfZeroMatchesSourceAndAveragesVariants) {
  const PromptModel m = model();
  const std::vector<ShiftSpec> shifts = {{ShiftKind::Brightness, 0.0}, {ShiftKind::Noise, 0.3},
                                         {ShiftKind::StylePermutation, 0.5}};
  const DomainResult d = eval_domain_generalization(*backbone, m, *data, shifts);
  ASSERT_EQ(d.variant_acc.size(), 3u);
  EXPECT_EQ(d.variant_acc[0], d.source_acc);
  EXPECT_NEAR(d.ood_average, (d.variant_acc[0] + d.variant_acc[1] + d.variant_acc[2]) / 3, 1e-15);
  EXPECT_EQ(shifts[1].name(), "noise@0.3");
}

TEST_F(Protocols, CorollaryStartsAtTheIndependentSolution) {
  const auto split = split_base_new(*data, 0.5);
  const auto train = select_classes(data->train, split.base);
  const LabelSpace space = LabelSpace::of(*data, split.base);
  const TrainConfig c = config();
  const CorollaryResult r = corollary1_experiment(*backbone, train, space, c, continuation_config(c));
  EXPECT_NEAR(r.loss_bmip_initial, r.loss_independent, 1e-6);
  TrainConfig frozen = continuation_config(c);
  frozen.learning_rate = 0.0;
  const CorollaryResult z = corollary1_experiment(*backbone, train, space, c, frozen);
  EXPECT_EQ(z.loss_bmip_from_saturated_init, z.loss_bmip_initial);
}

}  // namespace
}  // namespace bmip
