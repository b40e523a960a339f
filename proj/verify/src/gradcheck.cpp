#include "bmip/verify/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "bmip/aggregation.hpp"
#include "bmip/random.hpp"
#include "bmip/verify/micro.hpp"

namespace bmip::verify {

double relative_error(std::span<const double> analytic, std::span<const double> numeric) {
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), kGradientNormFloor});
}

GradcheckCase check_gradients(std::string name, std::uint64_t seed, const std::function<Tensor()>& f,
                              const std::vector<Tensor>& inputs, double step) {
  GradcheckCase result{std::move(name), seed, 0.0, 0};
  std::vector<double> weights;
  auto objective = [&]() -> Tensor {
    Tensor out = f();
    if (weights.empty()) {
      Rng rng(derive_seed(seed, 0x6C));
      weights.resize(out.numel());
      for (double& w : weights) w = rng.uniform(-1.0, 1.0);
    }
    return sum(mul(out, Tensor::from(out.shape(), weights)));
  };

  for (Tensor t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  objective().backward();
  std::vector<std::vector<double>> analytic;
  for (const Tensor& t : inputs) analytic.push_back(t.grad());

  NoGradGuard no_grad;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor t = inputs[k];
    auto values = t.mutable_data();
    std::vector<double> numeric(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + step;
      const double up = objective().item();
      values[i] = saved - step;
      const double down = objective().item();
      values[i] = saved;
      numeric[i] = (up - down) / (2.0 * step);
    }
    result.coordinates += values.size();
    result.max_relative_error = std::max(result.max_relative_error, relative_error(analytic[k], numeric));
  }
  return result;
}

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v));
}

std::vector<Tensor> tensors_of(const std::vector<NamedTensor>& named) {
  std::vector<Tensor> out;
  for (const auto& [name, t] : named) out.push_back(t);
  return out;
}

void op_cases(std::uint64_t seed, std::vector<GradcheckCase>& out) {
  Rng rng(derive_seed(seed, 0x0B));
  auto run = [&](const std::string& name, const std::function<Tensor()>& f, const std::vector<Tensor>& in) {
    out.push_back(check_gradients(name, seed, f, in));
  };

  Tensor a = random_tensor({2, 3, 4}, rng);
  Tensor b = random_tensor({2, 3, 4}, rng);
  Tensor row = random_tensor({4}, rng);
  Tensor col = random_tensor({3, 1}, rng);
  run("add", [=] { return add(a, b); }, {a, b});
  run("add.broadcast_row", [=] { return add(a, row); }, {a, row});
  run("sub.broadcast_column", [=] { return sub(a, col); }, {a, col});
  run("mul", [=] { return mul(a, b); }, {a, b});
  run("mul.broadcast_row", [=] { return mul(a, row); }, {a, row});
  run("mul.self", [=] { return mul(a, a); }, {a});
  run("scale", [=] { return scale(a, -1.7); }, {a});
  run("add_scalar", [=] { return add_scalar(a, 0.3); }, {a});

  Tensor m = random_tensor({2, 3, 4}, rng);
  Tensor w = random_tensor({4, 5}, rng);
  Tensor wt = random_tensor({5, 4}, rng);
  Tensor bw = random_tensor({2, 4, 5}, rng);
  Tensor bwt = random_tensor({2, 5, 4}, rng);
  run("matmul.shared", [=] { return matmul(m, w); }, {m, w});
  run("matmul.shared_transposed", [=] { return matmul(m, wt, true); }, {m, wt});
  run("matmul.batched", [=] { return matmul(m, bw); }, {m, bw});
  run("matmul.batched_transposed", [=] { return matmul(m, bwt, true); }, {m, bwt});

  Tensor c = random_tensor({2, 2, 4}, rng);
  const std::vector<std::size_t> rows = {2, 0, 2};
  const std::vector<std::size_t> order = {2, 0, 1};
  run("concat", [=] { return concat({a, c}, 1); }, {a, c});
  run("slice", [=] { return slice(a, 2, 1, 3); }, {a});
  run("index_select.repeated", [=] { return index_select(a, 1, rows); }, {a});
  run("reshape", [=] { return reshape(mul(a, a), {6, 4}); }, {a});
  run("permute", [=] { return permute(a, order); }, {a});
  run("repeat_leading", [=] { return repeat_leading(row, 3); }, {row});

  run("sum", [=] { return sum(mul(a, a)); }, {a});
  run("mean", [=] { return mean(mul(a, b)); }, {a, b});
  run("sum.axis", [=] { return sum(mul(a, a), 1); }, {a});
  run("mean.axis", [=] { return mean(mul(a, a), 2); }, {a});

  Tensor gain = random_tensor({4}, rng, 0.5, 1.5);
  Tensor bias = random_tensor({4}, rng);
  run("softmax.last", [=] { return softmax(scale(a, 3.0), 2); }, {a});
  run("softmax.middle", [=] { return softmax(a, 1); }, {a});
  run("layer_norm", [=] { return layer_norm(a, gain, bias); }, {a, gain, bias});
  run("gelu", [=] { return gelu(scale(a, 3.0)); }, {a});
  run("sigmoid", [=] { return sigmoid(scale(a, 3.0)); }, {a});
  run("exp", [=] { return exp(a); }, {a});
  run("l2_normalize", [=] { return l2_normalize(a); }, {a});

  Tensor table = random_tensor({6, 4}, rng);
  const std::vector<int> ids = {3, 0, 3, 5};
  run("embedding", [=] { return embedding(table, ids); }, {table});

  Tensor logits = random_tensor({4, 5}, rng, -3.0, 3.0);
  const std::vector<int> labels = {0, 4, 2, 2};
  std::vector<double> targets(20, 0.0);
  for (std::size_t r = 0; r < 4; ++r) {
    targets[r * 5 + r] = 0.7;
    targets[r * 5 + 4] += 0.3;
  }
  run("cross_entropy", [=] { return cross_entropy(logits, labels); }, {logits});
  run("soft_cross_entropy", [=] { return soft_cross_entropy(logits, targets); }, {logits});

  Tensor feats_i = random_tensor({3, 4}, rng);
  Tensor feats_t = random_tensor({5, 4}, rng);
  Tensor log_tau = Tensor::scalar(std::log(0.5));
  Tensor feats_p = random_tensor({3, 4}, rng);
  run("cosine_logits", [=] { return cosine_logits(feats_i, feats_t, 0.3); }, {feats_i, feats_t});
  run("contrastive_loss", [=] { return contrastive_loss(feats_i, feats_p, log_tau); }, {feats_i, feats_p, log_tau});

  AttentionWeights aw;
  for (Tensor* t : {&aw.wq, &aw.wk, &aw.wv, &aw.wo}) *t = random_tensor({4, 4}, rng, -0.8, 0.8);
  for (Tensor* t : {&aw.bq, &aw.bk, &aw.bv, &aw.bo}) *t = random_tensor({4}, rng, -0.2, 0.2);
  Tensor kv = random_tensor({2, 5, 4}, rng);
  const std::vector<Tensor> attn_in = {a, kv, aw.wq, aw.bq, aw.wk, aw.bk, aw.wv, aw.bv, aw.wo, aw.bo};
  run("multi_head_attention.output", [=] { return multi_head_attention(a, kv, kv, aw, 2).output; }, attn_in);
  run("multi_head_attention.map", [=] { return multi_head_attention(a, kv, kv, aw, 2).attention_map; }, attn_in);
}

void model_cases(std::uint64_t seed, std::vector<GradcheckCase>& out) {
  {
    // One encoder block, every block parameter plus the input.
    MicroProblem p = make_micro_problem(Strategy::Independent, 1, 1, seed);
    const BlockParams blk = p.backbone.params.vision_blocks[0];
    Rng rng(derive_seed(seed, 0x0C));
    Tensor x = random_tensor({2, 5, 8}, rng);
    std::vector<Tensor> in = {x, blk.ln1_gain, blk.ln1_bias, blk.attention.wq, blk.attention.bq, blk.attention.wk,
                              blk.attention.bk, blk.attention.wv, blk.attention.bv, blk.attention.wo,
                              blk.attention.bo, blk.ln2_gain, blk.ln2_bias, blk.fc_weight, blk.fc_bias,
                              blk.proj_weight, blk.proj_bias};
    out.push_back(check_gradients("transformer_block", seed, [=] { return transformer_block(x, blk, 2).output; }, in));
  }
  {
    MicroProblem p = make_micro_problem(Strategy::Bmip, 1, 1, seed);
    const Tensor own = p.model.language.prompts[0];
    const Tensor other = p.model.interaction.language_head(1).apply(p.model.vision.prompts[0]).detach();
    Rng rng(derive_seed(seed, 0x0D));
    Tensor wb = random_tensor({1}, rng, 0.1, 0.9);
    Tensor wbb = random_tensor({3, 1}, rng, 0.1, 0.9);
    out.push_back(check_gradients("gated_mix.shared", seed, [=] { return gated_mix(own, other, wb); }, {own, other, wb}));
    out.push_back(
        check_gradients("gated_mix.per_sequence", seed, [=] { return gated_mix(own, other, wbb); }, {own, other, wbb}));
    Tensor probs = softmax(random_tensor({2, 2, 5, 5}, rng, -2.0, 2.0), 3).detach();
    const std::vector<std::size_t> keys = {3, 4};
    out.push_back(check_gradients("extract_prompt_attention", seed,
                                  [=] { return extract_prompt_attention(probs, keys); }, {probs}));
  }
  // Full dual-encoder forward with interaction, every backbone and prompt
  // parameter differentiated. K = 2, J = 1 per the micro setup, plus J = 2
  // so the attention-derived gate path is covered.
  for (std::size_t depth : {1, 2}) {
    for (Strategy s : kAllStrategies) {
      if (depth == 2 && s != Strategy::Bmip) continue;
      MicroProblem p = make_micro_problem(s, depth, 2, seed);
      std::vector<Tensor> in = tensors_of(p.backbone.params.named_parameters());
      for (const Tensor& t : p.model.parameters()) in.push_back(t);
      auto f = [&p] {
        InteractiveOutput o = interactive_forward(p.backbone, p.model, embed_text(p.backbone, p.captions),
                                                  embed_image(p.backbone, p.images));
        return concat({reshape(o.text.output, {o.text.output.numel()}), reshape(o.vision.output, {o.vision.output.numel()})},
                      0);
      };
      const std::string name =
          "interactive_forward." + std::string(strategy_name(s)) + ".J" + std::to_string(depth);
      out.push_back(check_gradients(name, seed, f, in));
    }
  }
  {
    // Prompted classification loss end to end, prompts only (the tuning path).
    MicroProblem p = make_micro_problem(Strategy::Bmip, 2, 2, seed);
    const std::vector<int> labels = {2, 0};
    auto f = [&p, labels] {
      Tensor z = prompted_class_features(p.backbone, p.model, p.captions);
      Tensor x = prompted_image_features(p.backbone, p.model, p.images);
      return cross_entropy(cosine_logits(x, z, p.backbone.temperature()), labels);
    };
    out.push_back(check_gradients("prompted_loss.bmip.J2", seed, f, p.model.parameters()));
  }
}

}  // namespace

std::vector<GradcheckCase> run_gradcheck_suite(std::span<const std::uint64_t> seeds) {
  std::vector<GradcheckCase> out;
  for (std::uint64_t seed : seeds) {
    op_cases(seed, out);
    model_cases(seed, out);
  }
  return out;
}

}  // namespace bmip::verify
