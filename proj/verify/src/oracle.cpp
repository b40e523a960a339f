#include "bmip/verify/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>

#include "bmip/verify/micro.hpp"

namespace bmip::verify {

namespace {

// Row-major matrix of doubles.
struct Mat {
  std::size_t rows = 0, cols = 0;
  std::vector<double> v;

  Mat() = default;
  Mat(std::size_t r, std::size_t c) : rows(r), cols(c), v(r * c, 0.0) {}
  double& operator()(std::size_t r, std::size_t c) { return v[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return v[r * cols + c]; }
};

using Params = std::map<std::string, Mat>;

Params read_params(const std::vector<NamedTensor>& named) {
  Params out;
  for (const auto& [name, t] : named) {
    const auto& s = t.shape();
    const std::size_t cols = s.empty() ? 1 : s.back();
    Mat m(t.numel() / cols, cols);
    const auto d = t.data();
    std::copy(d.begin(), d.end(), m.v.begin());
    out[name] = std::move(m);
  }
  return out;
}

const Mat& get(const Params& p, const std::string& name) {
  auto it = p.find(name);
  if (it == p.end()) throw std::logic_error("oracle: missing parameter " + name);
  return it->second;
}

Mat affine(const Mat& x, const Mat& w, const Mat* b) {
  Mat y(x.rows, w.cols);
  for (std::size_t r = 0; r < x.rows; ++r) {
    for (std::size_t c = 0; c < w.cols; ++c) {
      double acc = 0.0;
      for (std::size_t k = 0; k < x.cols; ++k) acc += x(r, k) * w(k, c);
      y(r, c) = acc + (b ? b->v[c] : 0.0);
    }
  }
  return y;
}

Mat layer_norm_rows(const Mat& x, const Mat& gain, const Mat& bias) {
  Mat y(x.rows, x.cols);
  const double n = static_cast<double>(x.cols);
  for (std::size_t r = 0; r < x.rows; ++r) {
    double mu = 0.0;
    for (std::size_t c = 0; c < x.cols; ++c) mu += x(r, c);
    mu /= n;
    double var = 0.0;
    for (std::size_t c = 0; c < x.cols; ++c) var += (x(r, c) - mu) * (x(r, c) - mu);
    var /= n;
    const double inv = 1.0 / std::sqrt(var + 1e-5);
    for (std::size_t c = 0; c < x.cols; ++c) y(r, c) = (x(r, c) - mu) * inv * gain.v[c] + bias.v[c];
  }
  return y;
}

double gelu_scalar(double x) {
  const double c = std::sqrt(2.0 / 3.14159265358979323846);
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// probs[h][q][k] of one sequence.
using AttentionMap = std::vector<std::vector<std::vector<double>>>;

struct BlockResult {
  Mat out;
  AttentionMap probs;
};

BlockResult block(const Params& p, const std::string& prefix, const Mat& x, std::size_t heads) {
  auto P = [&](const char* n) -> const Mat& { return get(p, prefix + n); };
  const std::size_t n = x.rows, D = x.cols, dh = D / heads;
  const Mat h = layer_norm_rows(x, P("ln1.gain"), P("ln1.bias"));
  const Mat q = affine(h, P("attn.wq"), &P("attn.bq"));
  const Mat k = affine(h, P("attn.wk"), &P("attn.bk"));
  const Mat v = affine(h, P("attn.wv"), &P("attn.bv"));
  Mat context(n, D);
  AttentionMap probs(heads, std::vector<std::vector<double>>(n, std::vector<double>(n)));
  for (std::size_t hd = 0; hd < heads; ++hd) {
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> s(n);
      double peak = -INFINITY;
      for (std::size_t j = 0; j < n; ++j) {
        double dot = 0.0;
        for (std::size_t d = 0; d < dh; ++d) dot += q(i, hd * dh + d) * k(j, hd * dh + d);
        s[j] = dot / std::sqrt(static_cast<double>(dh));
        peak = std::max(peak, s[j]);
      }
      double z = 0.0;
      for (double& e : s) z += (e = std::exp(e - peak));
      for (std::size_t j = 0; j < n; ++j) probs[hd][i][j] = s[j] / z;
      for (std::size_t d = 0; d < dh; ++d) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += probs[hd][i][j] * v(j, hd * dh + d);
        context(i, hd * dh + d) = acc;
      }
    }
  }
  Mat residual = affine(context, P("attn.wo"), &P("attn.bo"));
  for (std::size_t i = 0; i < residual.v.size(); ++i) residual.v[i] += x.v[i];
  Mat hidden = affine(layer_norm_rows(residual, P("ln2.gain"), P("ln2.bias")), P("mlp.fc_weight"), &P("mlp.fc_bias"));
  for (double& e : hidden.v) e = gelu_scalar(e);
  Mat out = affine(hidden, P("mlp.proj_weight"), &P("mlp.proj_bias"));
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] += residual.v[i];
  return {std::move(out), std::move(probs)};
}

// Mean attention that non-prompt queries direct at each prompt key.
std::vector<double> prompt_attention(const AttentionMap& probs, const std::vector<std::size_t>& keys) {
  const std::size_t n = probs[0].size();
  std::vector<double> out(keys.size(), 0.0);
  for (std::size_t j = 0; j < keys.size(); ++j) {
    double acc = 0.0;
    std::size_t count = 0;
    for (const auto& head : probs) {
      for (std::size_t q = 0; q < n; ++q) {
        if (std::find(keys.begin(), keys.end(), q) != keys.end()) continue;
        acc += head[q][keys[j]];
        ++count;
      }
    }
    out[j] = acc / static_cast<double>(count);
  }
  return out;
}

double row_cosine(const Mat& a, const Mat& b, std::size_t r) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t c = 0; c < a.cols; ++c) {
    ab += a(r, c) * b(r, c);
    aa += a(r, c) * a(r, c);
    bb += b(r, c) * b(r, c);
  }
  return ab / (std::sqrt(aa) * std::sqrt(bb));
}

Mat mix(const Mat& own, const Mat& other, const std::vector<double>& w) {
  Mat out(own.rows, own.cols);
  for (std::size_t r = 0; r < own.rows; ++r) {
    for (std::size_t c = 0; c < own.cols; ++c) out(r, c) = w[r] * own(r, c) + (1.0 - w[r]) * other(r, c);
  }
  return out;
}

Mat stack_rows(const Mat& top, const Mat& bottom) {
  Mat out(top.rows + bottom.rows, top.cols);
  std::copy(top.v.begin(), top.v.end(), out.v.begin());
  std::copy(bottom.v.begin(), bottom.v.end(), out.v.begin() + static_cast<std::ptrdiff_t>(top.v.size()));
  return out;
}

Mat row_range(const Mat& x, std::size_t begin, std::size_t end) {
  Mat out(end - begin, x.cols);
  std::copy(x.v.begin() + static_cast<std::ptrdiff_t>(begin * x.cols),
            x.v.begin() + static_cast<std::ptrdiff_t>(end * x.cols), out.v.begin());
  return out;
}

struct PromptSide {
  const Params& tunable;
  Strategy strategy;
  std::size_t length;
  bool shared_heads;
  bool per_depth_gates;
};

std::string head_name(const PromptSide& s, const char* which, std::size_t layer) {
  return std::string("tunable/interaction.") + which + "." + std::to_string(s.shared_heads ? 1 : layer);
}
std::string gate_name(const PromptSide& s, const char* which, std::size_t layer) {
  return std::string("tunable/interaction.") + which + "." + std::to_string(s.per_depth_gates ? layer : 1);
}

// The prompts one sequence of `modality` sees at `layer`. attention is the
// per-prompt scalar A of that sequence (only read by the gated strategy).
Mat prompts_for(const PromptSide& s, bool language, std::size_t layer, const std::vector<double>& attention) {
  const std::string L = std::to_string(layer);
  const Mat& P = get(s.tunable, "tunable/language.prompt." + L);
  if (language && (s.strategy == Strategy::Independent || s.strategy == Strategy::UniDirectional)) return P;
  if (!language && s.strategy == Strategy::Independent) return get(s.tunable, "tunable/vision.prompt." + L);

  const std::string head = head_name(s, language ? "to_language" : "to_vision", layer);
  if (s.strategy == Strategy::UniDirectional) {
    return affine(P, get(s.tunable, head + ".weight"), &get(s.tunable, head + ".bias"));
  }
  const Mat& own = language ? P : get(s.tunable, "tunable/vision.prompt." + L);
  const Mat& source = language ? get(s.tunable, "tunable/vision.prompt." + L) : P;
  const Mat projected = affine(source, get(s.tunable, head + ".weight"), &get(s.tunable, head + ".bias"));
  switch (s.strategy) {
    case Strategy::Addition: {
      Mat out = own;
      for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] += projected.v[i];
      return out;
    }
    case Strategy::Joint:
      return stack_rows(own, projected);
    case Strategy::AttentionSim: {
      std::vector<double> w(own.rows);
      for (std::size_t r = 0; r < own.rows; ++r) w[r] = logistic(row_cosine(own, projected, r) / 0.1);
      return mix(own, projected, w);
    }
    case Strategy::Bmip: {
      const std::string gate = gate_name(s, language ? "language_gate" : "vision_gate", layer);
      const double a = get(s.tunable, gate + ".weight").v[0];
      const double c = get(s.tunable, gate + ".bias").v[0];
      std::vector<double> w(own.rows);
      for (std::size_t r = 0; r < own.rows; ++r) w[r] = logistic(a * attention[r] + c);
      return mix(own, projected, w);
    }
    default:
      throw std::logic_error("oracle: unhandled strategy");
  }
}

// Runs one sequence through K blocks with prompt replacement at layers 1..J.
// front: prompts precede the sequence tokens (text); otherwise they follow.
Mat encode(const Params& backbone, const std::string& encoder, std::size_t K, std::size_t heads,
           const PromptSide& side, std::size_t J, bool language, Mat state, std::size_t sequence_tokens,
           std::size_t* prompt_count_out) {
  const bool front = language;
  std::size_t prompt_count = 0;
  std::vector<std::size_t> keys;
  AttentionMap previous;
  for (std::size_t i = 1; i <= K; ++i) {
    Mat input = state;
    if (i <= J) {
      std::vector<double> attention;
      if (side.strategy == Strategy::Bmip) {
        attention = i == 1 ? std::vector<double>(side.length, 1.0 / static_cast<double>(side.length + sequence_tokens))
                           : prompt_attention(previous, keys);
      }
      const Mat prompts = prompts_for(side, language, i, attention);
      const Mat sequence = prompt_count == 0 ? state
                           : front          ? row_range(state, prompt_count, prompt_count + sequence_tokens)
                                            : row_range(state, 0, sequence_tokens);
      input = front ? stack_rows(prompts, sequence) : stack_rows(sequence, prompts);
      prompt_count = prompts.rows;
      keys.clear();
      for (std::size_t j = 0; j < prompt_count; ++j) keys.push_back(front ? j : sequence_tokens + j);
    }
    BlockResult r = block(backbone, encoder + ".block" + std::to_string(i - 1) + ".", input, heads);
    state = std::move(r.out);
    previous = std::move(r.probs);
  }
  *prompt_count_out = prompt_count;
  return state;
}

}  // namespace

OracleOutput naive_forward(const Backbone& backbone, const PromptModel& model, std::span<const Caption> captions,
                           std::span<const Image> images) {
  const Params bp = read_params(backbone.params.named_parameters());
  const Params tp = read_params(model.named_parameters());
  const auto& cfg = backbone.config;
  const std::size_t K = cfg.depth();
  const std::size_t dl = cfg.text.width, dv = cfg.vision.width;
  const PromptSide side{tp, model.strategy, model.length, model.interaction_config.shared_heads,
                        model.interaction_config.per_depth_gates};
  OracleOutput out;

  const Mat& table = get(bp, "text.token_embedding");
  const Mat& tpos = get(bp, "text.positions");
  for (const Caption& caption : captions) {
    const std::size_t x = caption.size();
    Mat w(x, dl);
    for (std::size_t t = 0; t < x; ++t) {
      for (std::size_t d = 0; d < dl; ++d) w(t, d) = table(static_cast<std::size_t>(caption[t]), d) + tpos(t, d);
    }
    std::size_t prompts = 0;
    const Mat final_state = encode(bp, "text", K, cfg.text.heads, side, model.depth, true, w, x, &prompts);
    const Mat words = row_range(final_state, prompts, prompts + x);
    out.text.insert(out.text.end(), words.v.begin(), words.v.end());
    std::size_t name = x - 1;
    while (caption[name] == 0) --name;
    const Mat feat = affine(layer_norm_rows(row_range(words, name, name + 1), get(bp, "text.final.gain"),
                                            get(bp, "text.final.bias")),
                            get(bp, "text.projection"), nullptr);
    out.text_features.insert(out.text_features.end(), feat.v.begin(), feat.v.end());
  }

  const auto& vc = cfg.vision;
  const std::size_t per_side = vc.image_side / vc.patch_size;
  const std::size_t m = per_side * per_side;
  const Mat& pw = get(bp, "vision.patch_weight");
  const Mat& pb = get(bp, "vision.patch_bias");
  const Mat& cls = get(bp, "vision.class_token");
  const Mat& vpos = get(bp, "vision.positions");
  for (const Image& image : images) {
    Mat x(1 + m, dv);
    for (std::size_t d = 0; d < dv; ++d) x(0, d) = cls.v[d] + vpos(0, d);
    for (std::size_t py = 0; py < per_side; ++py) {
      for (std::size_t px = 0; px < per_side; ++px) {
        const std::size_t row = 1 + py * per_side + px;
        for (std::size_t d = 0; d < dv; ++d) {
          double acc = 0.0;
          std::size_t f = 0;  // feature index within the patch: (y, x, channel)
          for (std::size_t y = 0; y < vc.patch_size; ++y) {
            for (std::size_t xx = 0; xx < vc.patch_size; ++xx) {
              for (std::size_t c = 0; c < vc.channels; ++c, ++f) {
                acc += image.at(py * vc.patch_size + y, px * vc.patch_size + xx, c) * pw(f, d);
              }
            }
          }
          x(row, d) = acc + pb.v[d] + vpos(row, d);
        }
      }
    }
    std::size_t prompts = 0;
    const Mat final_state = encode(bp, "vision", K, vc.heads, side, model.depth, false, x, 1 + m, &prompts);
    const Mat cls_k = row_range(final_state, 0, 1);
    out.vision.insert(out.vision.end(), cls_k.v.begin(), cls_k.v.end());
    const Mat feat = affine(layer_norm_rows(cls_k, get(bp, "vision.final.gain"), get(bp, "vision.final.bias")),
                            get(bp, "vision.projection"), nullptr);
    out.image_features.insert(out.image_features.end(), feat.v.begin(), feat.v.end());
  }
  return out;
}

std::vector<OracleCase> run_oracle_suite(std::span<const std::uint64_t> seeds) {
  std::vector<OracleCase> out;
  auto diff = [](std::span<const double> a, const std::vector<double>& b) -> double {
    if (a.size() != b.size()) return INFINITY;
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
    return worst;
  };
  for (std::uint64_t seed : seeds) {
    for (std::size_t depth : {1, 2}) {
      for (Strategy s : kAllStrategies) {
        MicroProblem p = make_micro_problem(s, depth, 1, seed);
        NoGradGuard no_grad;
        const Tensor words = embed_text(p.backbone, p.captions);
        const ImageEmbedding pixels = embed_image(p.backbone, p.images);
        const InteractiveOutput o = interactive_forward(p.backbone, p.model, words, pixels);
        const Tensor z = prompted_class_features(p.backbone, p.model, p.captions);
        const Tensor x = prompted_image_features(p.backbone, p.model, p.images);
        const OracleOutput ref = naive_forward(p.backbone, p.model, p.captions, p.images);
        const double worst = std::max({diff(o.text.output.data(), ref.text), diff(o.vision.output.data(), ref.vision),
                                       diff(z.data(), ref.text_features), diff(x.data(), ref.image_features)});
        out.push_back({s, depth, seed, worst});
      }
    }
  }
  return out;
}

}  // namespace bmip::verify
