#include "bmip/prompts.hpp"

#include <numeric>
#include <stdexcept>

#include "bmip/random.hpp"

namespace bmip {

PromptStack PromptStack::initialize(Modality modality, std::size_t depth, std::size_t length, std::size_t width,
                                    std::uint64_t seed) {
  if (length == 0) throw ConfigError("prompt stack: length must be at least 1");
  if (width == 0) throw ConfigError("prompt stack: width must be positive");
  PromptStack stack{modality, depth, length, width, {}};
  Rng rng(derive_seed(seed, modality == Modality::Language ? 0x1A : 0x1B));
  for (std::size_t i = 0; i < depth; ++i) {
    std::vector<double> v(length * width);
    for (double& x : v) x = rng.normal(0.0, kPromptInitStddev);
    stack.prompts.push_back(Tensor::from({length, width}, std::move(v), /*requires_grad=*/true));
  }
  return stack;
}

std::size_t PromptStack::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : prompts) n += p.numel();
  return n;
}

PromptStack PromptStack::clone() const {
  PromptStack copy = *this;
  for (auto& p : copy.prompts) p = p.detach(p.requires_grad());
  return copy;
}

namespace {

enum class Placement { Front, Back };

struct Prompted {
  const std::vector<BlockParams>& blocks;
  std::size_t heads;
  Placement placement;
  std::size_t sequence_tokens;
};

// Runs every block, replacing prompt slots at layers 1..depth.
EncoderTrace run_prompted(const Prompted& enc, Tensor state, std::size_t depth, const PromptSource& source,
                          const ForwardHooks& hooks) {
  const std::size_t K = enc.blocks.size();
  if (depth > K) {
    throw ConfigError("prompt depth " + std::to_string(depth) + " exceeds encoder depth " + std::to_string(K));
  }
  const std::size_t B = state.dim(0);
  const std::size_t D = state.dim(2);
  const std::size_t s = enc.sequence_tokens;
  EncoderTrace trace;
  std::size_t prompt_count = 0;  // prompt slots currently in `state`
  std::vector<std::size_t> keys;

  for (std::size_t i = 1; i <= K; ++i) {
    Tensor input = state;
    if (i <= depth) {
      PromptContext ctx;
      ctx.layer = i;
      if (i > 1) ctx.previous_attention = trace.attention_maps.back();
      ctx.previous_prompt_keys = trace.prompt_keys.empty() ? std::span<const std::size_t>{}
                                                           : std::span<const std::size_t>(trace.prompt_keys.back());
      ctx.sequence_tokens = s;
      ctx.batch = B;
      Tensor prompts = source(ctx);
      if (prompts.rank() == 2) prompts = repeat_leading(prompts, B);
      if (prompts.rank() != 3 || prompts.dim(0) != B || prompts.dim(2) != D || prompts.dim(1) == 0) {
        throw ShapeError("prompt source for layer " + std::to_string(i) + " returned " +
                         shape_string(prompts.shape()) + ", expected [b, " + std::to_string(D) + "] or [" +
                         std::to_string(B) + ", b, " + std::to_string(D) + "]");
      }
      const std::size_t b = prompts.dim(1);
      Tensor sequence = state;
      if (prompt_count > 0) {
        sequence = enc.placement == Placement::Front ? slice(state, 1, prompt_count, prompt_count + s)
                                                     : slice(state, 1, 0, s);
      }
      input = enc.placement == Placement::Front ? concat({prompts, sequence}, 1) : concat({sequence, prompts}, 1);
      keys.resize(b);
      std::iota(keys.begin(), keys.end(), enc.placement == Placement::Front ? 0 : s);
      prompt_count = b;
    }
    AttentionEdit edit;
    if (hooks.edit_attention) {
      edit = [&hooks, i](const Tensor& probs) { return hooks.edit_attention(i, probs); };
    }
    BlockOutput out = transformer_block(input, enc.blocks[i - 1], enc.heads, edit);
    state = hooks.edit_output ? hooks.edit_output(i, out.output) : out.output;
    trace.attention_maps.push_back(out.attention_map);
    trace.prompt_keys.push_back(keys);
  }
  trace.final_state = state;
  if (enc.placement == Placement::Front) {
    trace.output = prompt_count == 0 ? state : slice(state, 1, prompt_count, prompt_count + s);
  } else {
    trace.output = reshape(slice(state, 1, 0, 1), {B, D});
  }
  return trace;
}

PromptSource from_stack(const PromptStack& stack) {
  return [&stack](const PromptContext& ctx) { return stack.prompts.at(ctx.layer - 1); };
}

void expect_modality(const PromptStack& stack, Modality modality, const char* op) {
  if (stack.modality != modality) throw std::invalid_argument(std::string(op) + ": prompt stack has the wrong modality");
}

}  // namespace

EncoderTrace text_forward(const Backbone& backbone, const Tensor& word_embeddings, std::size_t depth,
                          const PromptSource& source, const ForwardHooks& hooks) {
  Prompted enc{backbone.params.text_blocks, backbone.config.text.heads, Placement::Front, word_embeddings.dim(1)};
  return run_prompted(enc, word_embeddings, depth, source, hooks);
}

EncoderTrace vision_forward(const Backbone& backbone, const ImageEmbedding& embedding, std::size_t depth,
                            const PromptSource& source, const ForwardHooks& hooks) {
  Tensor x = concat({embedding.class_token, embedding.patches}, 1);
  Prompted enc{backbone.params.vision_blocks, backbone.config.vision.heads, Placement::Back, x.dim(1)};
  return run_prompted(enc, x, depth, source, hooks);
}

EncoderTrace text_forward_with_prompts(const Backbone& backbone, const Tensor& word_embeddings,
                                       const PromptStack& stack, const ForwardHooks& hooks) {
  expect_modality(stack, Modality::Language, "text_forward_with_prompts");
  return text_forward(backbone, word_embeddings, stack.depth, from_stack(stack), hooks);
}

EncoderTrace vision_forward_with_prompts(const Backbone& backbone, const ImageEmbedding& embedding,
                                         const PromptStack& stack, const ForwardHooks& hooks) {
  expect_modality(stack, Modality::Vision, "vision_forward_with_prompts");
  return vision_forward(backbone, embedding, stack.depth, from_stack(stack), hooks);
}

}  // namespace bmip
