#include <filesystem>
#include <fstream>
#include <cstring>
#include <string>

#include <gtest/gtest.h>

#include "bmip/checkpoint.hpp"
#include "bmip/verify/micro.hpp"

namespace bmip {
namespace {

namespace fs = std::filesystem;

class CheckpointTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("bmip_ckpt_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                        ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  fs::path dir_;
};

TEST_F(CheckpointTest, RoundTripsBackboneAndPrompts) {
  const auto p = verify::make_micro_problem(Strategy::Bmip, 2, 2, 3);
  const fs::path path = dir_ / "model.ckpt";
  write_checkpoint(path, make_checkpoint(42, p.backbone, &p.model));
  const Checkpoint c = read_checkpoint(path, 42);
  EXPECT_NE(c.find("tunable/language.prompt.1"), nullptr);
  EXPECT_NE(c.find("frozen/text.token_embedding"), nullptr);
  const Backbone back = restore_backbone(c, p.backbone.config);
  EXPECT_EQ(back.params.digest(), p.backbone.params.digest());
  PromptModel fresh = PromptModel::initialize(p.backbone.config, Strategy::Bmip, 2, 2, {}, 99);
  restore_prompts(c, fresh);
  EXPECT_EQ(fresh.digest(), p.model.digest());
}

TEST_F(CheckpointTest, RefusesDigestMismatch) {
  const auto p = verify::make_micro_problem(Strategy::Independent, 1, 1, 1);
  const fs::path path = dir_ / "a.ckpt";
  write_checkpoint(path, make_checkpoint(7, p.backbone));
  EXPECT_THROW(read_checkpoint(path, 8), CheckpointError);
}

TEST_F(CheckpointTest, RefusesCorruptFiles) {
  const auto p = verify::make_micro_problem(Strategy::Independent, 1, 1, 1);
  const fs::path path = dir_ / "b.ckpt";
  write_checkpoint(path, make_checkpoint(7, p.backbone));
  const auto size = fs::file_size(path);

  fs::resize_file(path, size / 2);
  EXPECT_THROW(read_checkpoint(path, 7), CheckpointError);

  std::ofstream(path, std::ios::binary) << "NOPE and some bytes";
  EXPECT_THROW(read_checkpoint(path, 7), CheckpointError);
  EXPECT_THROW(read_checkpoint(dir_ / "missing.ckpt", 7), CheckpointError);
}

TEST_F(CheckpointTest, RefusesArchitectureMismatch) {
  const auto p = verify::make_micro_problem(Strategy::Independent, 1, 1, 1);
  const fs::path path = dir_ / "c.ckpt";
  write_checkpoint(path, make_checkpoint(7, p.backbone));
  BackboneConfig wider = p.backbone.config;
  wider.text.width = 16;
  EXPECT_THROW(restore_backbone(read_checkpoint(path, 7), wider), CheckpointError);
}

TEST_F(CheckpointTest, HeaderLayout) {
  const auto p = verify::make_micro_problem(Strategy::Independent, 1, 1, 1);
  const fs::path path = dir_ / "d.ckpt";
  write_checkpoint(path, make_checkpoint(0x1122334455667788ULL, p.backbone));
  std::ifstream is(path, std::ios::binary);
  char head[16];
  is.read(head, sizeof head);
  EXPECT_EQ(std::string(head, 4), "BMIP");
  std::uint32_t version;
  std::memcpy(&version, head + 4, 4);
  EXPECT_EQ(version, kCheckpointVersion);
  std::uint64_t digest;
  std::memcpy(&digest, head + 8, 8);
  EXPECT_EQ(digest, 0x1122334455667788ULL);
  for (const auto& entry : fs::directory_iterator(dir_)) {
    EXPECT_EQ(entry.path().string().find(".tmp"), std::string::npos) << "temporary left behind";
  }
}

}  // namespace
}  // namespace bmip
