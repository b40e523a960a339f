#include "bmip/aggregation.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "bmip/digest.hpp"
#include "bmip/random.hpp"

namespace bmip {

namespace {

thread_local std::size_t g_extractions = 0;

bool learns_vision_stack(Strategy s) { return s != Strategy::UniDirectional; }
bool uses_language_heads(Strategy s) {
  return s != Strategy::UniDirectional && s != Strategy::Independent;
}
bool uses_vision_heads(Strategy s) { return s != Strategy::Independent; }

Tensor one_minus(const Tensor& w) { return add_scalar(scale(w, -1.0), 1.0); }

void check_depth(const PromptModel& model, std::size_t depth) {
  if (depth < 1 || depth > model.depth) {
    throw std::invalid_argument("aggregation depth " + std::to_string(depth) + " outside 1.." +
                                std::to_string(model.depth));
  }
}

// Per-token cosine between matching rows of a and b: [b].
Tensor row_cosine(const Tensor& a, const Tensor& b) { return sum(mul(l2_normalize(a), l2_normalize(b)), 1); }

Tensor uniform_attention(std::size_t prompts, std::size_t sequence_tokens) {
  return Tensor::full({prompts}, 1.0 / static_cast<double>(prompts + sequence_tokens));
}

// P' for the model's strategy. attention is only read by Bmip.
Tensor language_prompts(const PromptModel& m, std::size_t depth, const Tensor& attention) {
  const Tensor& P = m.language.prompts[depth - 1];
  switch (m.strategy) {
    case Strategy::Independent:
    case Strategy::UniDirectional:
      return P;
    default:
      break;
  }
  const Tensor projected = m.interaction.language_head(depth).apply(m.vision.prompts[depth - 1]);
  switch (m.strategy) {
    case Strategy::Bmip:
      return gated_mix(P, projected, m.interaction.language_gate(depth).apply(attention));
    case Strategy::Addition:
      return add(P, projected);
    case Strategy::AttentionSim:
      return gated_mix(P, projected, sigmoid(scale(row_cosine(P, projected), 1.0 / kAttentionSimTemperature)));
    case Strategy::Joint:
      return concat({P, projected}, 0);
    default:
      return P;
  }
}

// P~' for the model's strategy.
Tensor vision_prompts(const PromptModel& m, std::size_t depth, const Tensor& attention) {
  if (m.strategy == Strategy::Independent) return m.vision.prompts[depth - 1];
  const Tensor projected = m.interaction.vision_head(depth).apply(m.language.prompts[depth - 1]);
  if (m.strategy == Strategy::UniDirectional) return projected;
  const Tensor& V = m.vision.prompts[depth - 1];
  switch (m.strategy) {
    case Strategy::Bmip:
      return gated_mix(V, projected, m.interaction.vision_gate(depth).apply(attention));
    case Strategy::Addition:
      return add(V, projected);
    case Strategy::AttentionSim:
      return gated_mix(V, projected, sigmoid(scale(row_cosine(V, projected), 1.0 / kAttentionSimTemperature)));
    case Strategy::Joint:
      return concat({V, projected}, 0);
    default:
      return V;
  }
}

// A for the prompts consumed at ctx.layer, read from the previous layer.
Tensor attention_scalars(const PromptModel& m, const PromptContext& ctx) {
  if (ctx.layer == 1) return uniform_attention(m.length, ctx.sequence_tokens);
  return extract_prompt_attention(ctx.previous_attention, ctx.previous_prompt_keys);
}

Projection init_projection(std::size_t in, std::size_t out, Rng& rng) {
  std::vector<double> w(in * out);
  const double s = 1.0 / std::sqrt(static_cast<double>(in));
  for (double& x : w) x = rng.normal(0.0, s);
  return {Tensor::from({in, out}, std::move(w), true), Tensor::zeros({out}, true)};
}

template <class T>
const T& pick(const std::vector<T>& items, std::size_t depth, const char* what) {
  if (items.empty()) throw std::logic_error(std::string("interaction has no ") + what);
  return items.size() == 1 ? items.front() : items.at(depth - 1);
}

}  // namespace

Strategy parse_strategy(std::string_view name) {
  for (Strategy s : kAllStrategies) {
    if (strategy_name(s) == name) return s;
  }
  throw ConfigError("unknown aggregation '" + std::string(name) +
                    "' (expected bmip, addition, attention_sim, joint, unidirectional, or independent)");
}

std::string_view strategy_name(Strategy strategy) {
  switch (strategy) {
    case Strategy::Bmip: return "bmip";
    case Strategy::Addition: return "addition";
    case Strategy::AttentionSim: return "attention_sim";
    case Strategy::Joint: return "joint";
    case Strategy::UniDirectional: return "unidirectional";
    case Strategy::Independent: return "independent";
  }
  return "unknown";
}

std::string InteractionConfig::canonical() const {
  std::ostringstream os;
  os.precision(17);
  os << "interaction.gate_bias_init=" << gate_bias_init << "\n"
     << "interaction.gate_weight_init=" << gate_weight_init << "\n"
     << "interaction.per_depth_gates=" << (per_depth_gates ? "true" : "false") << "\n"
     << "interaction.shared_heads=" << (shared_heads ? "true" : "false") << "\n";
  return os.str();
}

Tensor Projection::apply(const Tensor& x) const { return add(matmul(x, weight), bias); }

Tensor Gate::apply(const Tensor& attention) const { return sigmoid(add(mul(attention, weight), bias)); }

const Projection& InteractionParams::language_head(std::size_t depth) const {
  return pick(to_language, depth, "language projection heads");
}
const Projection& InteractionParams::vision_head(std::size_t depth) const {
  return pick(to_vision, depth, "vision projection heads");
}
const Gate& InteractionParams::language_gate(std::size_t depth) const {
  return pick(language_gates, depth, "language gates");
}
const Gate& InteractionParams::vision_gate(std::size_t depth) const {
  return pick(vision_gates, depth, "vision gates");
}

PromptModel PromptModel::initialize(const BackboneConfig& backbone, Strategy strategy, std::size_t depth,
                                    std::size_t length, const InteractionConfig& config, std::uint64_t seed) {
  backbone.validate();
  if (depth > backbone.depth()) {
    throw ConfigError("prompt depth " + std::to_string(depth) + " exceeds encoder depth " +
                      std::to_string(backbone.depth()));
  }
  const std::size_t dl = backbone.text.width;
  const std::size_t dv = backbone.vision.width;
  PromptModel m;
  m.strategy = strategy;
  m.interaction_config = config;
  m.depth = depth;
  m.length = length;
  m.language = PromptStack::initialize(Modality::Language, depth, length, dl, seed);
  m.vision = PromptStack::initialize(Modality::Vision, depth, length, dv, seed);
  Rng rng(derive_seed(seed, 0x1C));
  const std::size_t heads = depth == 0 ? 0 : (config.shared_heads ? 1 : depth);
  for (std::size_t i = 0; i < heads; ++i) {
    m.interaction.to_language.push_back(init_projection(dv, dl, rng));
    m.interaction.to_vision.push_back(init_projection(dl, dv, rng));
  }
  const std::size_t gates = depth == 0 ? 0 : (config.per_depth_gates ? depth : 1);
  for (std::size_t i = 0; i < gates; ++i) {
    for (auto* list : {&m.interaction.language_gates, &m.interaction.vision_gates}) {
      list->push_back({Tensor::full({1}, config.gate_weight_init, true), Tensor::full({1}, config.gate_bias_init, true)});
    }
  }
  return m;
}

std::vector<NamedTensor> PromptModel::named_parameters() const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < language.prompts.size(); ++i) {
    out.emplace_back("tunable/language.prompt." + std::to_string(i + 1), language.prompts[i]);
  }
  if (learns_vision_stack(strategy)) {
    for (std::size_t i = 0; i < vision.prompts.size(); ++i) {
      out.emplace_back("tunable/vision.prompt." + std::to_string(i + 1), vision.prompts[i]);
    }
  }
  auto heads = [&out](const std::vector<Projection>& list, const std::string& name) {
    for (std::size_t i = 0; i < list.size(); ++i) {
      const std::string prefix = "tunable/interaction." + name + "." + std::to_string(i + 1);
      out.emplace_back(prefix + ".weight", list[i].weight);
      out.emplace_back(prefix + ".bias", list[i].bias);
    }
  };
  if (uses_language_heads(strategy)) heads(interaction.to_language, "to_language");
  if (uses_vision_heads(strategy)) heads(interaction.to_vision, "to_vision");
  if (strategy == Strategy::Bmip) {
    auto gates = [&out](const std::vector<Gate>& list, const std::string& name) {
      for (std::size_t i = 0; i < list.size(); ++i) {
        const std::string prefix = "tunable/interaction." + name + "." + std::to_string(i + 1);
        out.emplace_back(prefix + ".weight", list[i].weight);
        out.emplace_back(prefix + ".bias", list[i].bias);
      }
    };
    gates(interaction.language_gates, "language_gate");
    gates(interaction.vision_gates, "vision_gate");
  }
  return out;
}

std::vector<Tensor> PromptModel::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

std::size_t PromptModel::prompt_parameter_count() const {
  std::size_t n = language.parameter_count();
  if (learns_vision_stack(strategy)) n += vision.parameter_count();
  return n;
}

std::uint64_t PromptModel::digest() const {
  Fnv1a h;
  h.text(strategy_name(strategy));
  for (auto& [name, t] : named_parameters()) {
    h.text(name);
    for (std::size_t d : t.shape()) h.u64(d);
    h.values(t.data());
  }
  return h.value();
}

PromptModel PromptModel::clone() const {
  PromptModel copy = *this;
  copy.language = language.clone();
  copy.vision = vision.clone();
  auto fresh = [](Tensor& t) { t = t.detach(t.requires_grad()); };
  for (auto* list : {&copy.interaction.to_language, &copy.interaction.to_vision}) {
    for (auto& p : *list) {
      fresh(p.weight);
      fresh(p.bias);
    }
  }
  for (auto* list : {&copy.interaction.language_gates, &copy.interaction.vision_gates}) {
    for (auto& g : *list) {
      fresh(g.weight);
      fresh(g.bias);
    }
  }
  return copy;
}

Tensor extract_prompt_attention(const Tensor& attention_map, std::span<const std::size_t> prompt_keys) {
  ++g_extractions;
  if (attention_map.rank() != 4) {
    throw ShapeError("extract_prompt_attention: expected [B, H, n_q, n_k], got " + shape_string(attention_map.shape()));
  }
  const std::size_t nq = attention_map.dim(2);
  const std::size_t nk = attention_map.dim(3);
  if (prompt_keys.empty()) throw std::invalid_argument("extract_prompt_attention: no prompt keys");
  std::vector<bool> is_prompt(std::max(nq, nk), false);
  for (std::size_t k : prompt_keys) {
    if (k >= nk) {
      throw std::invalid_argument("extract_prompt_attention: prompt key " + std::to_string(k) + " outside " +
                                  std::to_string(nk) + " keys");
    }
    is_prompt[k] = true;
  }
  std::vector<std::size_t> queries;
  for (std::size_t q = 0; q < nq; ++q) {
    if (!is_prompt[q]) queries.push_back(q);
  }
  if (queries.empty()) throw std::invalid_argument("extract_prompt_attention: every query is a prompt token");
  Tensor picked = index_select(index_select(attention_map, 2, queries), 3, prompt_keys);
  return mean(mean(picked, 2), 1);
}

std::size_t extraction_count() { return g_extractions; }
void reset_extraction_count() { g_extractions = 0; }

Tensor gated_mix(const Tensor& own, const Tensor& other_projected, const Tensor& weights) {
  if (own.shape() != other_projected.shape() || own.rank() != 2) {
    throw ShapeError("gated_mix: prompt shapes " + shape_string(own.shape()) + " and " +
                     shape_string(other_projected.shape()) + " differ");
  }
  const std::size_t b = own.dim(0);
  if (weights.rank() == 1 && weights.dim(0) == b) {
    const Tensor w = reshape(weights, {b, 1});
    return add(mul(own, w), mul(other_projected, one_minus(w)));
  }
  if (weights.rank() == 2 && weights.dim(1) == b) {
    const std::size_t B = weights.dim(0);
    const Tensor w = reshape(weights, {B, b, 1});
    return add(mul(repeat_leading(own, B), w), mul(repeat_leading(other_projected, B), one_minus(w)));
  }
  throw ShapeError("gated_mix: weights " + shape_string(weights.shape()) + " do not match " + std::to_string(b) +
                   " prompt tokens");
}

AggregatedPrompts bmip_aggregate(const PromptModel& model, std::size_t depth, const Tensor& language_attention,
                                 const Tensor& vision_attention) {
  check_depth(model, depth);
  if (model.strategy != Strategy::Bmip) throw std::invalid_argument("bmip_aggregate: model strategy is not bmip");
  return {language_prompts(model, depth, language_attention), vision_prompts(model, depth, vision_attention)};
}

AggregatedPrompts baseline_aggregate(const PromptModel& model, std::size_t depth) {
  check_depth(model, depth);
  if (model.strategy == Strategy::Bmip) throw std::invalid_argument("baseline_aggregate: strategy is bmip");
  return {language_prompts(model, depth, {}), vision_prompts(model, depth, {})};
}

PromptSource language_source(const PromptModel& model) {
  return [&model](const PromptContext& ctx) {
    const Tensor a = model.strategy == Strategy::Bmip ? attention_scalars(model, ctx) : Tensor{};
    return language_prompts(model, ctx.layer, a);
  };
}

PromptSource vision_source(const PromptModel& model) {
  return [&model](const PromptContext& ctx) {
    const Tensor a = model.strategy == Strategy::Bmip ? attention_scalars(model, ctx) : Tensor{};
    return vision_prompts(model, ctx.layer, a);
  };
}

InteractiveOutput interactive_forward(const Backbone& backbone, const PromptModel& model,
                                      const Tensor& word_embeddings, const ImageEmbedding& image_embedding,
                                      const ForwardHooks& text_hooks, const ForwardHooks& vision_hooks) {
  return {text_forward(backbone, word_embeddings, model.depth, language_source(model), text_hooks),
          vision_forward(backbone, image_embedding, model.depth, vision_source(model), vision_hooks)};
}

Tensor prompted_class_features(const Backbone& backbone, const PromptModel& model, std::span<const Caption> captions) {
  EncoderTrace trace = text_forward(backbone, embed_text(backbone, captions), model.depth, language_source(model));
  return text_features(backbone, trace.output, captions);
}

Tensor prompted_image_features(const Backbone& backbone, const PromptModel& model, std::span<const Image> images) {
  EncoderTrace trace = vision_forward(backbone, embed_image(backbone, images), model.depth, vision_source(model));
  return image_features(backbone, trace.output);
}

void saturate_gates(PromptModel& model, double logit) {
  for (auto* list : {&model.interaction.language_gates, &model.interaction.vision_gates}) {
    for (auto& g : *list) {
      g.weight.mutable_data()[0] = 0.0;
      g.bias.mutable_data()[0] = logit;
    }
  }
}

}  // namespace bmip
