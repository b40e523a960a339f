#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "bmip/cli/config.hpp"
#include "bmip/cli/runner.hpp"

namespace bmip::cli {
namespace {

namespace fs = std::filesystem;

const char* kTiny = R"(
[data]
classes = 4
train_shots = 2
test_per_class = 3
image_side = 8
vocab_size = 16
caption_length = 6

[backbone]
depth = 2
text_width = 8
text_heads = 2
vision_width = 8
vision_heads = 2
patch_size = 4
shared_dim = 4
mlp_ratio = 2

[pretrain]
steps = 4
batch_size = 4
pairs_per_class = 2

[train]
aggregation = bmip
epochs = 1
batch_size = 4

[prompt]
depth = 1
length = 1

[eval]
protocols = open_world
base_fraction = 0.5

[run]
seeds = 1-2
)";

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

TEST(Config, DefaultsResolveAndRoundTrip) {
  const ExperimentConfig d;
  EXPECT_NO_THROW(d.validate());
  const ExperimentConfig back = parse_config(to_ini(d));
  EXPECT_EQ(back.canonical(), d.canonical());
  EXPECT_EQ(back.digest(), d.digest());
  EXPECT_EQ(d.digest().size(), 16u);
}

TEST(Config, ParsesSectionsAndTiesBackboneToData) {
  const ExperimentConfig c = parse_config(kTiny);
  EXPECT_EQ(c.data.classes, 4u);
  EXPECT_EQ(c.backbone.text.context_length, 6u);
  EXPECT_EQ(c.backbone.text.vocab_size, 16u);
  EXPECT_EQ(c.backbone.vision.image_side, 8u);
  EXPECT_EQ(c.backbone.vision.depth, 2u);
  EXPECT_EQ(c.train.strategy, Strategy::Bmip);
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{1, 2}));
  EXPECT_EQ(c.eval.protocols, std::vector<Protocol>{Protocol::OpenWorld});
}

TEST(Config, RejectsUnknownAndMalformedFields) {
  EXPECT_THROW(parse_config("[train]\nlearning_rat = 0.1\n"), ConfigError);
  EXPECT_THROW(parse_config("[nowhere]\nx = 1\n"), ConfigError);
  EXPECT_THROW(parse_config("[train]\nepochs = ten\n"), ConfigError);
  EXPECT_THROW(parse_config("[train]\naggregation = fancy\n"), ConfigError);
  EXPECT_THROW(parse_config("[backbone]\ntext_heads = 3\n"), ConfigError);
  try {
    parse_config("[train]\nlearning_rat = 0.1\n");
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("train.learning_rat"), std::string::npos) << e.what();
  }
}

TEST(Config, DigestIgnoresSeedsAndWorkersOnly) {
  const ExperimentConfig a = parse_config(kTiny);
  ExperimentConfig b = a;
  b.seeds = {7};
  b.workers = 4;
  EXPECT_EQ(a.digest(), b.digest());
  b.train.learning_rate = 0.2;
  EXPECT_NE(a.digest(), b.digest());
  ExperimentConfig c = a;
  c.train.strategy = Strategy::Joint;
  EXPECT_NE(a.digest(), c.digest());
}

TEST(Config, SeedAndStrategyLists) {
  EXPECT_EQ(parse_seed_list("1-3"), (std::vector<std::uint64_t>{1, 2, 3}));
  EXPECT_EQ(parse_seed_list("5,2"), (std::vector<std::uint64_t>{5, 2}));
  EXPECT_THROW(parse_seed_list("1,1"), ConfigError);
  EXPECT_THROW(parse_seed_list("3-1"), ConfigError);
  EXPECT_THROW(parse_seed_list(""), ConfigError);
  EXPECT_EQ(parse_strategy_list("bmip,independent"), (std::vector<Strategy>{Strategy::Bmip, Strategy::Independent}));
  EXPECT_THROW(parse_strategy_list("bmip,nope"), ConfigError);
}

class RunnerTest : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::temp_directory_path() / ("bmip_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(root_);
  }
  void TearDown() override { fs::remove_all(root_); }
  fs::path root_;
};

TEST_F(RunnerTest, OutputRootFollowsEnvironment) {
  ::setenv(kOutputRootVariable, root_.c_str(), 1);
  EXPECT_EQ(output_root(), root_);
  ::setenv(kOutputRootVariable, "", 1);
  EXPECT_EQ(output_root(), fs::path("bmip-runs"));
  ::unsetenv(kOutputRootVariable);
}

TEST_F(RunnerTest, RunWritesArtifactsAndReportReadsThemBack) {
  const ExperimentConfig c = parse_config(kTiny);
  const RunResult r = run_experiment(c, root_, {.export_data = true});
  EXPECT_TRUE(r.failed.empty());
  EXPECT_EQ(r.report.seeds, (std::vector<std::uint64_t>{1, 2}));
  for (std::uint64_t s : {1, 2}) {
    EXPECT_TRUE(fs::exists(r.paths.seed_record(s)));
    EXPECT_TRUE(fs::exists(r.paths.prompt_checkpoint(s)));
    EXPECT_TRUE(fs::exists(r.paths.dataset_export(s)));
  }
  EXPECT_EQ(load_report(r.paths.run_dir).to_text(), slurp(r.paths.report_json()));
  EXPECT_TRUE(r.report.summaries.count("open_world.hm"));
  EXPECT_FALSE(r.report.summaries.count("cross_dataset.average"));
  const std::string manifest = slurp(r.paths.manifest());
  EXPECT_NE(manifest.find("\"partial\": false"), std::string::npos);
  EXPECT_NE(manifest.find(c.digest()), std::string::npos);
  EXPECT_NE(describe_plan(c, root_).find("cached"), std::string::npos);
}

TEST_F(RunnerTest, RecordsAreByteIdenticalAcrossRunsAndWorkerCounts) {
  ExperimentConfig c = parse_config(kTiny);
  const RunResult a = run_experiment(c, root_ / "a", {});
  c.workers = 2;
  const RunResult b = run_experiment(c, root_ / "b", {});
  for (std::uint64_t s : {1, 2}) EXPECT_EQ(slurp(a.paths.seed_record(s)), slurp(b.paths.seed_record(s)));
}

TEST_F(RunnerTest, ReportRefusesEditedConfigOrForeignRecords) {
  const ExperimentConfig c = parse_config(kTiny);
  const RunResult r = run_experiment(c, root_, {});
  const std::string ini = slurp(r.paths.config());
  std::string edited = ini;
  edited.replace(edited.find("epochs = 1"), 10, "epochs = 3");
  std::ofstream(r.paths.config(), std::ios::trunc) << edited;
  EXPECT_THROW(load_report(r.paths.run_dir), ArtifactError);
  std::ofstream(r.paths.config(), std::ios::trunc) << ini << "\n[train]\nepochs = 3\n";
  EXPECT_THROW(load_report(r.paths.run_dir), ArtifactError);
  fs::remove(r.paths.config());
  EXPECT_NO_THROW(load_report(r.paths.run_dir));

  ExperimentConfig other = c;
  other.train.epochs = 2;
  const RunResult o = run_experiment(other, root_, {});
  fs::copy_file(o.paths.seed_record(1), r.paths.run_dir / "seeds" / "seed-9.json");
  EXPECT_THROW(load_report(r.paths.run_dir), ArtifactError);
  EXPECT_THROW(load_report(root_ / "nothing-here"), ArtifactError);
}

TEST_F(RunnerTest, SweepFlagsButDoesNotFail) {
  const ExperimentConfig c = parse_config(kTiny);
  const SweepResult s = run_sweep(c, {Strategy::Independent, Strategy::UniDirectional, Strategy::Bmip}, root_, {});
  ASSERT_EQ(s.reports.size(), 3u);
  ASSERT_EQ(s.checks.size(), 2u);
  EXPECT_EQ(s.checks[0].rival, "independent");
  EXPECT_EQ(s.checks[1].rival, "unidirectional");
  EXPECT_TRUE(fs::exists(s.dir / "sweep.json"));
  for (const auto& check : s.checks) {
    EXPECT_EQ(s.table.find("directional check unmet: " + check.describe()) != std::string::npos, !check.met());
  }
}

TEST_F(RunnerTest, WriteAtomicReplacesWholeFile) {
  const fs::path p = root_ / "x" / "f.txt";
  write_atomic(p, "first version, longer");
  write_atomic(p, "second");
  EXPECT_EQ(slurp(p), "second");
  std::size_t files = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(p.parent_path())) ++files;
  EXPECT_EQ(files, 1u);
}

}  // namespace
}  // namespace bmip::cli
