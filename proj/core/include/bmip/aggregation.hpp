#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bmip/backbone.hpp"
#include "bmip/prompts.hpp"
#include "bmip/tensor.hpp"

namespace bmip {

enum class Strategy { Bmip, Addition, AttentionSim, Joint, UniDirectional, Independent };

/// Config spelling: bmip|addition|attention_sim|joint|unidirectional|independent.
Strategy parse_strategy(std::string_view name);
std::string_view strategy_name(Strategy strategy);
inline constexpr Strategy kAllStrategies[] = {Strategy::Bmip,         Strategy::Independent,
                                              Strategy::UniDirectional, Strategy::Addition,
                                              Strategy::AttentionSim, Strategy::Joint};

struct InteractionConfig {
  bool per_depth_gates = false;  // default: one gate per modality, shared by all depths
  bool shared_heads = false;     // default: one F_l/F_v pair per depth
  double gate_weight_init = 1.0;
  double gate_bias_init = 2.0;   // sigmoid(2) ~ 0.88: starts close to no interaction

  std::string canonical() const;
};

/// Affine map x W + c, W: [in, out].
struct Projection {
  Tensor weight, bias;
  Tensor apply(const Tensor& x) const;
};

/// w = sigmoid(weight * A + bias), scalars.
struct Gate {
  Tensor weight, bias;
  Tensor apply(const Tensor& attention) const;
};

struct InteractionParams {
  std::vector<Projection> to_language;  // F_l: d_v -> d_l
  std::vector<Projection> to_vision;    // F_v: d_l -> d_v
  std::vector<Gate> language_gates;     // L_l
  std::vector<Gate> vision_gates;       // L_v

  /// depth is 1-based. Shared modes store a single entry.
  const Projection& language_head(std::size_t depth) const;
  const Projection& vision_head(std::size_t depth) const;
  const Gate& language_gate(std::size_t depth) const;
  const Gate& vision_gate(std::size_t depth) const;
};

/// Everything prompt tuning may update, plus the strategy that wires it.
struct PromptModel {
  Strategy strategy = Strategy::Bmip;
  InteractionConfig interaction_config;
  std::size_t depth = 0;   // J
  std::size_t length = 1;  // b
  PromptStack language;
  PromptStack vision;
  InteractionParams interaction;

  static PromptModel initialize(const BackboneConfig& backbone, Strategy strategy, std::size_t depth,
                                std::size_t length, const InteractionConfig& config, std::uint64_t seed);

  /// Parameters the strategy actually learns, as "tunable/..." names in a
  /// fixed order. Components the strategy never reads are left out.
  std::vector<NamedTensor> named_parameters() const;
  std::vector<Tensor> parameters() const;
  /// J * b * (d_l + d_v) for strategies with both stacks; J * b * d_l for
  /// UniDirectional, whose vision prompts are projections.
  std::size_t prompt_parameter_count() const;
  std::uint64_t digest() const;
  PromptModel clone() const;
};

/// Mean over heads and over non-prompt queries of the attention each prompt
/// key receives, per sequence. attention_map: [B, H, n, n] -> [B, b].
/// Throws std::invalid_argument for invalid keys or if every query is a prompt.
Tensor extract_prompt_attention(const Tensor& attention_map, std::span<const std::size_t> prompt_keys);

/// Number of extract_prompt_attention calls on this thread since the last reset.
std::size_t extraction_count();
void reset_extraction_count();

/// Gated convex mixes. own: [b, d], other_projected: [b, d], weights: [b] or
/// [B, b]. Returns w * own + (1 - w) * other_projected, [b, d] or [B, b, d].
Tensor gated_mix(const Tensor& own, const Tensor& other_projected, const Tensor& weights);

struct AggregatedPrompts {
  Tensor language;  // P'
  Tensor vision;    // P~'
};

/// Bi-directional update at depth (1-based) from the raw prompts of that
/// depth and attention scalars A_l, A_v ([b] or [B, b] each).
AggregatedPrompts bmip_aggregate(const PromptModel& model, std::size_t depth, const Tensor& language_attention,
                                 const Tensor& vision_attention);

/// The non-gated strategies at depth. Attention inputs are ignored.
AggregatedPrompts baseline_aggregate(const PromptModel& model, std::size_t depth);

inline constexpr double kAttentionSimTemperature = 0.1;

/// Per-modality prompt sources wired to the model's strategy.
PromptSource language_source(const PromptModel& model);
PromptSource vision_source(const PromptModel& model);

struct InteractiveOutput {
  EncoderTrace text;    // text.output = W_K
  EncoderTrace vision;  // vision.output = CLS_K
};

InteractiveOutput interactive_forward(const Backbone& backbone, const PromptModel& model,
                                      const Tensor& word_embeddings, const ImageEmbedding& image_embedding,
                                      const ForwardHooks& text_hooks = {}, const ForwardHooks& vision_hooks = {});

/// z for each caption under the prompt model: [N, d_shared].
Tensor prompted_class_features(const Backbone& backbone, const PromptModel& model, std::span<const Caption> captions);
/// x for each image under the prompt model: [B, d_shared].
Tensor prompted_image_features(const Backbone& backbone, const PromptModel& model, std::span<const Image> images);

/// Pins every gate to w = sigmoid(logit) regardless of A (weight 0).
void saturate_gates(PromptModel& model, double logit);
inline constexpr double kSaturatedGateLogit = 30.0;  // 1 - w ~ 1e-13

}  // namespace bmip
