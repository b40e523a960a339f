#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "bmip/image.hpp"

namespace bmip {

/// Knobs of the procedural bimodal world.
///
/// visual_variance (sigma_v) scales blob position/color jitter and additive
/// pixel noise. text_separation (delta_t) controls how often captions swap a
/// class's name token for its pair partner's; at 0 the two classes of each
/// adjacent pair (2k, 2k+1) share one name token outright.
struct SyntheticSpec {
  std::size_t classes = 10;
  std::size_t train_shots = 16;
  std::size_t test_per_class = 50;
  double visual_variance = 0.3;
  double text_separation = 0.3;
  std::size_t image_side = 16;
  std::size_t vocab_size = 64;
  std::size_t caption_length = 8;
  std::uint64_t seed = 1;

  /// Throws ConfigError: classes < 4, sigma_v < 0, delta_t outside [0, 1],
  /// vocabulary too small for the reserved and name tokens, etc.
  void validate() const;
  std::string canonical() const;
};

inline constexpr int kPadToken = 0;
inline constexpr int kTemplateTokens[] = {1, 2, 3, 4};  // "a photo of a"
inline constexpr int kFirstNameToken = 5;

struct Blob {
  double cx = 0, cy = 0, radius = 1;
  std::array<double, 3> color{};
};

struct ClassPrototype {
  std::array<double, 3> background{};
  std::vector<Blob> blobs;
  int name_token = kFirstNameToken;
};

struct LabeledExample {
  Image image;
  Caption caption;  // canonical caption of `label`
  int label = 0;
};

struct SyntheticDataset {
  SyntheticSpec spec;
  std::vector<ClassPrototype> prototypes;
  std::vector<Caption> class_captions;  // one hand-template caption per class
  std::vector<LabeledExample> train;    // train_shots per class
  std::vector<LabeledExample> test;     // test_per_class per class

  std::size_t num_classes() const { return prototypes.size(); }
};

/// Pure function of spec (seed included).
SyntheticDataset generate(const SyntheticSpec& spec);

/// Image of class `label` rendered with the spec's jitter from `sample_seed`.
Image render_example(const SyntheticDataset& dataset, int label, std::uint64_t sample_seed);

/// Caption "a photo of a [name]" padded to caption_length.
Caption template_caption(int name_token, std::size_t caption_length);

struct PairedCorpus {
  std::vector<Image> images;
  std::vector<Caption> captions;
  std::vector<int> labels;
};

/// Image-caption pairs for contrastive pretraining, drawn from a stream
/// disjoint from train/test. With probability (1 - delta_t) / 2 a caption uses
/// the pair partner's name token.
PairedCorpus pretraining_corpus(const SyntheticDataset& dataset, std::size_t pairs_per_class);

struct BaseNewSplit {
  std::vector<int> base;  // sorted
  std::vector<int> novel; // sorted
};

/// Seeded class partition with round(N * fraction) base classes.
/// Throws std::invalid_argument if either side would be empty.
BaseNewSplit split_base_new(const SyntheticDataset& dataset, double fraction);

/// Training examples whose class lies in `classes`.
std::vector<LabeledExample> select_classes(const std::vector<LabeledExample>& examples,
                                           const std::vector<int>& classes);

enum class ShiftKind { Brightness, Noise, StylePermutation };

/// "brightness", "noise", "style-permutation"; anything else is rejected.
ShiftKind parse_shift(std::string_view name);
std::string_view shift_name(ShiftKind kind);

/// Label-preserving pixel shift of every image. magnitude 0 is the identity.
SyntheticDataset make_shifted_variant(const SyntheticDataset& dataset, ShiftKind kind, double magnitude);

/// A related dataset over the same concepts: class ids relabeled by a seeded
/// permutation (prototype, name, and caption move together), examples
/// resampled from a fresh stream, and visual variance replaced.
SyntheticDataset make_transfer_target(const SyntheticDataset& source, std::size_t index, double visual_variance);

/// Writes one line per example: "<split>\t<class>\t<tokens>\t<pixels>" with
/// space-separated tokens and pixels (%.17g, row-major HWC).
void export_records(const SyntheticDataset& dataset, const std::filesystem::path& path);

/// Mean over classes of the per-pixel variance across that class's examples.
double mean_within_class_variance(const std::vector<LabeledExample>& examples, std::size_t classes);

}  // namespace bmip
