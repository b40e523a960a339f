#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "bmip/backbone.hpp"
#include "bmip/tensor.hpp"

namespace bmip {

enum class Modality { Language, Vision };

/// Learnable deep prompts of one modality: prompts[i - 1] is consumed at the
/// input of layer i, for i = 1..depth. Each is [length, width].
struct PromptStack {
  Modality modality = Modality::Language;
  std::size_t depth = 0;
  std::size_t length = 1;
  std::size_t width = 0;
  std::vector<Tensor> prompts;

  /// N(0, 0.02) entries, requires_grad on.
  static PromptStack initialize(Modality modality, std::size_t depth, std::size_t length, std::size_t width,
                                std::uint64_t seed);

  std::size_t parameter_count() const;
  PromptStack clone() const;
};

inline constexpr double kPromptInitStddev = 0.02;

/// What a prompt source sees when asked for the prompts of `layer`.
struct PromptContext {
  std::size_t layer = 1;                          // 1-based consuming layer
  Tensor previous_attention;                      // layer - 1's map [B, H, n, n]; undefined at layer 1
  std::span<const std::size_t> previous_prompt_keys;  // prompt positions in layer - 1's input
  std::size_t sequence_tokens = 0;                // non-prompt tokens per sequence (x, or 1 + m)
  std::size_t batch = 0;
};

/// Returns the prompts inserted at ctx.layer: [b', width] shared by the
/// batch, or [batch, b', width] per sequence. b' may differ from the stack
/// length (e.g. concatenating aggregators).
using PromptSource = std::function<Tensor(const PromptContext&)>;

/// Instrumentation points, all 1-based by layer. edit_attention rewrites a
/// layer's post-softmax map before it weights the values; edit_output
/// rewrites a layer's full output before the next layer sees it.
struct ForwardHooks {
  std::function<Tensor(std::size_t layer, const Tensor& probs)> edit_attention;
  std::function<Tensor(std::size_t layer, const Tensor& output)> edit_output;
};

struct EncoderTrace {
  Tensor output;                                   // W_K [B, x, d_l] or CLS_K [B, d_v]
  Tensor final_state;                              // full last-layer output, prompt slots included
  std::vector<Tensor> attention_maps;              // per layer, [B, H, n_i, n_i]
  std::vector<std::vector<std::size_t>> prompt_keys;  // per layer, prompt positions in its input
};

/// Text token order [P, W]. For layers i <= depth the prompt slots of the
/// previous output are dropped and replaced by source(i); later layers see the
/// full previous output. depth 0 runs the plain encoder. Throws ConfigError
/// if depth exceeds the encoder depth.
EncoderTrace text_forward(const Backbone& backbone, const Tensor& word_embeddings, std::size_t depth,
                          const PromptSource& source, const ForwardHooks& hooks = {});

/// Vision token order [CLS, E, P]. Same replacement rule; returns CLS_K.
EncoderTrace vision_forward(const Backbone& backbone, const ImageEmbedding& embedding, std::size_t depth,
                            const PromptSource& source, const ForwardHooks& hooks = {});

/// Forwards fed directly from a stack (no interaction).
EncoderTrace text_forward_with_prompts(const Backbone& backbone, const Tensor& word_embeddings,
                                       const PromptStack& stack, const ForwardHooks& hooks = {});
EncoderTrace vision_forward_with_prompts(const Backbone& backbone, const ImageEmbedding& embedding,
                                         const PromptStack& stack, const ForwardHooks& hooks = {});

}  // namespace bmip
