#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "bmip/image.hpp"
#include "bmip/optim.hpp"
#include "bmip/tensor.hpp"

namespace bmip {

struct TextEncoderConfig {
  std::size_t depth = 6;
  std::size_t width = 32;
  std::size_t heads = 4;
  std::size_t context_length = 8;  // caption length x, pads included
  std::size_t vocab_size = 64;
};

struct VisionEncoderConfig {
  std::size_t depth = 6;
  std::size_t width = 48;
  std::size_t heads = 4;
  std::size_t image_side = 16;
  std::size_t patch_size = 4;
  std::size_t channels = 3;

  std::size_t patches_per_side() const { return image_side / patch_size; }
  std::size_t num_patches() const { return patches_per_side() * patches_per_side(); }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
};

struct BackboneConfig {
  TextEncoderConfig text;
  VisionEncoderConfig vision;
  std::size_t shared_dim = 32;
  std::size_t mlp_ratio = 4;
  double init_temperature = 0.07;

  /// Throws ConfigError on mismatched depths, width % heads != 0, or an
  /// image side not divisible by the patch size.
  void validate() const;
  /// Depth K shared by both encoders.
  std::size_t depth() const { return text.depth; }
  /// Canonical "key=value" lines covering every field; input to digests.
  std::string canonical() const;
};

/// Pre-LN transformer block: x + MHA(LN(x)), then h + MLP(LN(h)).
struct BlockParams {
  Tensor ln1_gain, ln1_bias;
  AttentionWeights attention;
  Tensor ln2_gain, ln2_bias;
  Tensor fc_weight, fc_bias;      // [D, r D], [r D]
  Tensor proj_weight, proj_bias;  // [r D, D], [D]
};

struct BlockOutput {
  Tensor output;
  Tensor attention_map;  // [B, heads, n, n]
};

BlockOutput transformer_block(const Tensor& x, const BlockParams& block, std::size_t heads,
                              const AttentionEdit& edit = {});

using NamedTensor = std::pair<std::string, Tensor>;

struct BackboneParams {
  // text encoder g
  Tensor token_embedding;  // E_w: [vocab, d_l]
  Tensor text_positions;   // [x, d_l]
  std::vector<BlockParams> text_blocks;
  Tensor text_final_gain, text_final_bias;
  Tensor text_projection;  // TextProj: [d_l, d_shared]
  // image encoder f
  Tensor patch_weight;     // [p*p*C, d_v]
  Tensor patch_bias;       // [d_v]
  Tensor class_token;      // CLS seed: [d_v]
  Tensor vision_positions; // [1 + m, d_v]
  std::vector<BlockParams> vision_blocks;
  Tensor vision_final_gain, vision_final_bias;
  Tensor image_projection; // ImageProj: [d_v, d_shared]
  Tensor log_temperature;  // [1], tau = exp(log_temperature) > 0

  /// Stable, fully-qualified parameter names in a fixed order.
  std::vector<NamedTensor> named_parameters() const;
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;
  void set_requires_grad(bool flag);
  /// FNV-1a over names, shapes, and values of every parameter.
  std::uint64_t digest() const;
  /// Deep copy with no shared storage.
  BackboneParams clone() const;
};

struct Backbone {
  BackboneConfig config;
  BackboneParams params;

  static Backbone initialize(const BackboneConfig& config, std::uint64_t seed);
  double temperature() const;
};

// Embedding layers -------------------------------------------------------------

/// W_0 = E_w(tokens) + positions, shaped [N, x, d_l]. Every caption must have
/// exactly context_length tokens; out-of-vocabulary ids are rejected.
Tensor embed_text(const Backbone& backbone, std::span<const Caption> captions);

/// Flattened non-overlapping patches of one image: [m, p*p*C], patches in
/// raster order, each patch (row, col, channel) row-major.
std::vector<double> extract_patches(const Image& image, std::size_t patch_size);

struct ImageEmbedding {
  Tensor class_token;  // CLS_0: [B, 1, d_v], position 0 added
  Tensor patches;      // E_0: [B, m, d_v], positions 1..m added
};

ImageEmbedding embed_image(const Backbone& backbone, std::span<const Image> images);

// Plain (promptless) encoders -------------------------------------------------

/// Runs all K text blocks with no prompts; returns W_K [N, x, d_l].
Tensor encode_text_plain(const Backbone& backbone, const Tensor& word_embeddings);
/// Runs all K vision blocks on [CLS_0, E_0]; returns CLS_K [B, d_v].
Tensor encode_image_plain(const Backbone& backbone, const ImageEmbedding& embedding);

/// Index of the class-name token: the last non-pad (non-zero) token.
std::size_t class_name_position(const Caption& caption);

/// z = TextProj(LN(W_K at each caption's class-name position)): [N, d_shared].
Tensor text_features(const Backbone& backbone, const Tensor& final_words, std::span<const Caption> captions);
/// x = ImageProj(LN(CLS_K)): [B, d_shared].
Tensor image_features(const Backbone& backbone, const Tensor& final_class_token);

// Classification rule ----------------------------------------------------------

/// cos(x_b, z_n) / tau for every pair: [B, N]. Zero-norm features are rejected.
Tensor cosine_logits(const Tensor& image_feats, const Tensor& class_feats, double temperature);
/// softmax over classes of the cosine logits: [B, N].
Tensor classify(const Tensor& image_feats, const Tensor& class_feats, double temperature);

// Contrastive pretraining --------------------------------------------------------

struct PretrainConfig {
  std::size_t steps = 200;
  std::size_t batch_size = 32;
  double learning_rate = 0.03;
  /// Global gradient-norm cap; 0 disables. Without it the first steps from a
  /// random init collapse every feature onto one direction.
  double clip_norm = 1.0;
  double momentum = 0.9;
  Schedule schedule = Schedule::Cosine;
  std::uint64_t seed = 0;

  std::string canonical() const;
};

struct PretrainLog {
  std::vector<double> losses;  // one entry per step
};

/// Symmetric in-batch cross-entropy over image/caption similarities.
Tensor contrastive_loss(const Tensor& image_feats, const Tensor& text_feats, const Tensor& log_temperature);

/// Trains every backbone parameter on paired (image, caption) data and returns
/// the result frozen (requires_grad off). Deterministic in (config, data, seed).
/// Throws std::invalid_argument for batch_size < 2 or mismatched pair counts.
Backbone pretrain_contrastive(const BackboneConfig& config, std::span<const Image> images,
                              std::span<const Caption> captions, const PretrainConfig& train,
                              PretrainLog* log = nullptr);

}  // namespace bmip
