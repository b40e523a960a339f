#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "bmip/backbone.hpp"
#include "bmip/verify/micro.hpp"

namespace bmip {
namespace {

using verify::micro_backbone_config;

std::vector<Image> micro_images(std::size_t count) {
  std::vector<Image> out;
  for (std::size_t i = 0; i < count; ++i) {
    Image img{4, 3, std::vector<double>(48)};
    for (std::size_t k = 0; k < img.pixels.size(); ++k) img.pixels[k] = std::fmod(0.37 * (k + 1) * (i + 1), 1.0);
    out.push_back(img);
  }
  return out;
}

TEST(BackboneConfig, RejectsInconsistentShapes) {
  BackboneConfig c = micro_backbone_config();
  EXPECT_NO_THROW(c.validate());
  c.text.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = micro_backbone_config();
  c.vision.depth = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = micro_backbone_config();
  c.vision.patch_size = 3;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(BackboneConfig, CanonicalDistinguishesFields) {
  BackboneConfig a = micro_backbone_config(), b = a;
  b.init_temperature = 0.05;
  EXPECT_NE(a.canonical(), b.canonical());
}

TEST(PatchEmbedding, PatchesAreRasterOrderedAndRowMajor) {
  Image img{4, 1, std::vector<double>(16)};
  for (std::size_t k = 0; k < 16; ++k) img.pixels[k] = static_cast<double>(k);
  const auto p = extract_patches(img, 2);
  // Patch 0 covers rows 0-1, cols 0-1; patch 1 cols 2-3; patch 2 rows 2-3.
  const std::vector<double> expected = {0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15};
  EXPECT_EQ(p, expected);
}

TEST(PatchEmbedding, ShapesFollowConfig) {
  const Backbone bb = Backbone::initialize(micro_backbone_config(), 1);
  const auto images = micro_images(3);
  const ImageEmbedding e = embed_image(bb, images);
  EXPECT_EQ(e.class_token.shape(), (Shape{3, 1, 8}));
  EXPECT_EQ(e.patches.shape(), (Shape{3, 4, 8}));
}

TEST(TextEmbedding, RejectsBadCaptions) {
  const Backbone bb = Backbone::initialize(micro_backbone_config(), 1);
  const std::vector<Caption> short_caption = {{1, 2, 3}};
  EXPECT_THROW(embed_text(bb, short_caption), std::invalid_argument);
  const std::vector<Caption> oov = {{1, 2, 3, 99}};
  EXPECT_THROW(embed_text(bb, oov), std::out_of_range);
}

TEST(TextEmbedding, ClassNamePositionIsLastNonPad) {
  EXPECT_EQ(class_name_position({1, 2, 5, 0}), 2u);
  EXPECT_EQ(class_name_position({1, 3, 6, 7}), 3u);
  EXPECT_THROW(class_name_position({0, 0, 0}), std::invalid_argument);
}

TEST(BackboneParams, DigestTracksValuesAndCloneIsDeep) {
  Backbone bb = Backbone::initialize(micro_backbone_config(), 7);
  const auto d0 = bb.params.digest();
  EXPECT_EQ(d0, Backbone::initialize(micro_backbone_config(), 7).params.digest());
  EXPECT_NE(d0, Backbone::initialize(micro_backbone_config(), 8).params.digest());
  BackboneParams copy = bb.params.clone();
  copy.token_embedding.mutable_data()[0] += 1e-12;
  EXPECT_EQ(bb.params.digest(), d0);
  EXPECT_NE(copy.digest(), d0);
}

TEST(BackboneParams, NamesAreUniqueAndCountsAgree) {
  const Backbone bb = Backbone::initialize(micro_backbone_config(), 1);
  const auto named = bb.params.named_parameters();
  std::size_t total = 0;
  for (std::size_t i = 0; i < named.size(); ++i) {
    total += named[i].second.numel();
    for (std::size_t j = i + 1; j < named.size(); ++j) EXPECT_NE(named[i].first, named[j].first);
  }
  EXPECT_EQ(total, bb.params.parameter_count());
}

TEST(Classifier, ProbabilitiesSumToOne) {
  const auto p = verify::make_micro_problem(Strategy::Bmip, 1, 1, 3);
  const Tensor x = image_features(p.backbone, encode_image_plain(p.backbone, embed_image(p.backbone, p.images)));
  const Tensor words = encode_text_plain(p.backbone, embed_text(p.backbone, p.captions));
  const Tensor z = text_features(p.backbone, words, p.captions);
  const Tensor probs = classify(x, z, p.backbone.temperature());
  ASSERT_EQ(probs.shape(), (Shape{2, 3}));
  for (std::size_t b = 0; b < 2; ++b) {
    double s = 0;
    for (std::size_t n = 0; n < 3; ++n) {
      EXPECT_GE(probs.at(b * 3 + n), 0.0);
      s += probs.at(b * 3 + n);
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Classifier, CosineLogitsIgnoreFeatureScale) {
  const Tensor x = Tensor::from({1, 2}, {1.0, 2.0});
  const Tensor z = Tensor::from({2, 2}, {3.0, -1.0, 0.5, 0.5});
  const Tensor a = cosine_logits(x, z, 0.1);
  const Tensor b = cosine_logits(scale(x, 7.0), scale(z, 0.01), 0.1);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(a.at(i), b.at(i), 1e-12);
  // cos = (3 - 2) / (sqrt 5 sqrt 10), divided by tau.
  EXPECT_NEAR(a.at(0), 1.0 / (std::sqrt(5.0) * std::sqrt(10.0)) / 0.1, 1e-13);
}

TEST(Pretraining, DeterministicAndFrozen) {
  const BackboneConfig config = micro_backbone_config();
  const auto images = micro_images(8);
  std::vector<Caption> captions;
  for (int i = 0; i < 8; ++i) captions.push_back({1, 2, 3 + i % 5, 0});
  PretrainConfig train;
  train.steps = 6;
  train.batch_size = 4;
  train.seed = 11;
  PretrainLog log;
  const Backbone a = pretrain_contrastive(config, images, captions, train, &log);
  const Backbone b = pretrain_contrastive(config, images, captions, train);
  EXPECT_EQ(a.params.digest(), b.params.digest());
  EXPECT_EQ(log.losses.size(), 6u);
  for (const auto& [name, t] : a.params.named_parameters()) EXPECT_FALSE(t.requires_grad()) << name;
  EXPECT_GT(a.temperature(), 0.0);
}

TEST(Pretraining, RejectsDegenerateBatches) {
  const auto images = micro_images(2);
  const std::vector<Caption> captions = {{1, 2, 3, 0}, {1, 2, 4, 0}};
  PretrainConfig train;
  train.batch_size = 1;
  EXPECT_THROW(pretrain_contrastive(micro_backbone_config(), images, captions, train), std::invalid_argument);
  const std::vector<Caption> one = {{1, 2, 3, 0}};
  train.batch_size = 2;
  EXPECT_THROW(pretrain_contrastive(micro_backbone_config(), images, one, train), std::invalid_argument);
}

}  // namespace
}  // namespace bmip
