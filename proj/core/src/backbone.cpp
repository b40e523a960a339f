#include "bmip/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "bmip/digest.hpp"
#include "bmip/random.hpp"

namespace bmip {

std::string digest_hex(std::uint64_t digest) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(digest));
  return buf;
}

void BackboneConfig::validate() const {
  if (text.depth != vision.depth) {
    throw ConfigError("backbone: text depth " + std::to_string(text.depth) + " differs from vision depth " +
                      std::to_string(vision.depth));
  }
  if (text.depth == 0) throw ConfigError("backbone: depth must be positive");
  if (text.heads == 0 || text.width % text.heads != 0) {
    throw ConfigError("backbone: text width " + std::to_string(text.width) + " not divisible by " +
                      std::to_string(text.heads) + " heads");
  }
  if (vision.heads == 0 || vision.width % vision.heads != 0) {
    throw ConfigError("backbone: vision width " + std::to_string(vision.width) + " not divisible by " +
                      std::to_string(vision.heads) + " heads");
  }
  if (vision.patch_size == 0 || vision.image_side % vision.patch_size != 0) {
    throw ConfigError("backbone: image side " + std::to_string(vision.image_side) +
                      " not divisible by patch size " + std::to_string(vision.patch_size));
  }
  if (text.context_length == 0 || text.vocab_size == 0 || shared_dim == 0 || mlp_ratio == 0 ||
      vision.channels == 0) {
    throw ConfigError("backbone: extents must be positive");
  }
  if (!(init_temperature > 0.0)) throw ConfigError("backbone: temperature must be positive");
}

std::string BackboneConfig::canonical() const {
  std::ostringstream os;
  os.precision(17);
  os << "backbone.depth=" << text.depth << "\n"
     << "backbone.image_side=" << vision.image_side << "\n"
     << "backbone.init_temperature=" << init_temperature << "\n"
     << "backbone.mlp_ratio=" << mlp_ratio << "\n"
     << "backbone.patch_size=" << vision.patch_size << "\n"
     << "backbone.channels=" << vision.channels << "\n"
     << "backbone.shared_dim=" << shared_dim << "\n"
     << "backbone.text_context=" << text.context_length << "\n"
     << "backbone.text_heads=" << text.heads << "\n"
     << "backbone.text_width=" << text.width << "\n"
     << "backbone.vision_heads=" << vision.heads << "\n"
     << "backbone.vision_width=" << vision.width << "\n"
     << "backbone.vocab_size=" << text.vocab_size << "\n";
  return os.str();
}

BlockOutput transformer_block(const Tensor& x, const BlockParams& p, std::size_t heads,
                              const AttentionEdit& edit) {
  Tensor h = layer_norm(x, p.ln1_gain, p.ln1_bias);
  AttentionResult attn = multi_head_attention(h, h, h, p.attention, heads, edit);
  Tensor residual = add(x, attn.output);
  Tensor m = layer_norm(residual, p.ln2_gain, p.ln2_bias);
  m = add(matmul(gelu(add(matmul(m, p.fc_weight), p.fc_bias)), p.proj_weight), p.proj_bias);
  return {add(residual, m), attn.attention_map};
}

namespace {

void append_block(std::vector<NamedTensor>& out, const std::string& prefix, const BlockParams& b) {
  out.emplace_back(prefix + "ln1.gain", b.ln1_gain);
  out.emplace_back(prefix + "ln1.bias", b.ln1_bias);
  out.emplace_back(prefix + "attn.wq", b.attention.wq);
  out.emplace_back(prefix + "attn.bq", b.attention.bq);
  out.emplace_back(prefix + "attn.wk", b.attention.wk);
  out.emplace_back(prefix + "attn.bk", b.attention.bk);
  out.emplace_back(prefix + "attn.wv", b.attention.wv);
  out.emplace_back(prefix + "attn.bv", b.attention.bv);
  out.emplace_back(prefix + "attn.wo", b.attention.wo);
  out.emplace_back(prefix + "attn.bo", b.attention.bo);
  out.emplace_back(prefix + "ln2.gain", b.ln2_gain);
  out.emplace_back(prefix + "ln2.bias", b.ln2_bias);
  out.emplace_back(prefix + "mlp.fc_weight", b.fc_weight);
  out.emplace_back(prefix + "mlp.fc_bias", b.fc_bias);
  out.emplace_back(prefix + "mlp.proj_weight", b.proj_weight);
  out.emplace_back(prefix + "mlp.proj_bias", b.proj_bias);
}

Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.normal(0.0, stddev);
  return Tensor::from(std::move(shape), std::move(v));
}

BlockParams init_block(std::size_t width, std::size_t mlp_ratio, std::size_t depth, Rng& rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(width));
  const double out_s = s / std::sqrt(2.0 * static_cast<double>(depth));
  const std::size_t hidden = width * mlp_ratio;
  BlockParams b;
  b.ln1_gain = Tensor::full({width}, 1.0);
  b.ln1_bias = Tensor::zeros({width});
  b.attention.wq = normal_tensor({width, width}, s, rng);
  b.attention.bq = Tensor::zeros({width});
  b.attention.wk = normal_tensor({width, width}, s, rng);
  b.attention.bk = Tensor::zeros({width});
  b.attention.wv = normal_tensor({width, width}, s, rng);
  b.attention.bv = Tensor::zeros({width});
  b.attention.wo = normal_tensor({width, width}, out_s, rng);
  b.attention.bo = Tensor::zeros({width});
  b.ln2_gain = Tensor::full({width}, 1.0);
  b.ln2_bias = Tensor::zeros({width});
  b.fc_weight = normal_tensor({width, hidden}, s, rng);
  b.fc_bias = Tensor::zeros({hidden});
  b.proj_weight = normal_tensor({hidden, width}, out_s / std::sqrt(static_cast<double>(mlp_ratio)), rng);
  b.proj_bias = Tensor::zeros({width});
  return b;
}

Tensor run_blocks(const std::vector<BlockParams>& blocks, std::size_t heads, Tensor x) {
  for (const auto& block : blocks) x = transformer_block(x, block, heads).output;
  return x;
}

}  // namespace

std::vector<NamedTensor> BackboneParams::named_parameters() const {
  std::vector<NamedTensor> out;
  out.emplace_back("text.token_embedding", token_embedding);
  out.emplace_back("text.positions", text_positions);
  for (std::size_t i = 0; i < text_blocks.size(); ++i) {
    append_block(out, "text.block" + std::to_string(i) + ".", text_blocks[i]);
  }
  out.emplace_back("text.final.gain", text_final_gain);
  out.emplace_back("text.final.bias", text_final_bias);
  out.emplace_back("text.projection", text_projection);
  out.emplace_back("vision.patch_weight", patch_weight);
  out.emplace_back("vision.patch_bias", patch_bias);
  out.emplace_back("vision.class_token", class_token);
  out.emplace_back("vision.positions", vision_positions);
  for (std::size_t i = 0; i < vision_blocks.size(); ++i) {
    append_block(out, "vision.block" + std::to_string(i) + ".", vision_blocks[i]);
  }
  out.emplace_back("vision.final.gain", vision_final_gain);
  out.emplace_back("vision.final.bias", vision_final_bias);
  out.emplace_back("vision.projection", image_projection);
  out.emplace_back("log_temperature", log_temperature);
  return out;
}

std::vector<Tensor> BackboneParams::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

std::size_t BackboneParams::parameter_count() const {
  std::size_t n = 0;
  for (auto& [name, t] : named_parameters()) n += t.numel();
  return n;
}

void BackboneParams::set_requires_grad(bool flag) {
  for (auto& [name, t] : named_parameters()) {
    Tensor handle = t;
    handle.set_requires_grad(flag);
  }
}

std::uint64_t BackboneParams::digest() const {
  Fnv1a h;
  for (auto& [name, t] : named_parameters()) {
    h.text(name);
    for (std::size_t d : t.shape()) h.u64(d);
    h.values(t.data());
  }
  return h.value();
}

BackboneParams BackboneParams::clone() const {
  BackboneParams copy = *this;
  // Rebind every handle in the copy to fresh storage, in the same order.
  auto rebind = [](Tensor& t) { t = t.detach(t.requires_grad()); };
  rebind(copy.token_embedding);
  rebind(copy.text_positions);
  for (auto* blocks : {&copy.text_blocks, &copy.vision_blocks}) {
    for (auto& b : *blocks) {
      for (Tensor* t : {&b.ln1_gain, &b.ln1_bias, &b.attention.wq, &b.attention.bq, &b.attention.wk,
                        &b.attention.bk, &b.attention.wv, &b.attention.bv, &b.attention.wo, &b.attention.bo,
                        &b.ln2_gain, &b.ln2_bias, &b.fc_weight, &b.fc_bias, &b.proj_weight, &b.proj_bias}) {
        rebind(*t);
      }
    }
  }
  for (Tensor* t : {&copy.text_final_gain, &copy.text_final_bias, &copy.text_projection, &copy.patch_weight,
                    &copy.patch_bias, &copy.class_token, &copy.vision_positions, &copy.vision_final_gain,
                    &copy.vision_final_bias, &copy.image_projection, &copy.log_temperature}) {
    rebind(*t);
  }
  return copy;
}

Backbone Backbone::initialize(const BackboneConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(derive_seed(seed, 0xB0B));
  const auto& tc = config.text;
  const auto& vc = config.vision;
  const std::size_t K = config.depth();
  BackboneParams p;
  p.token_embedding = normal_tensor({tc.vocab_size, tc.width}, 0.1, rng);
  p.text_positions = normal_tensor({tc.context_length, tc.width}, 0.1, rng);
  for (std::size_t i = 0; i < K; ++i) p.text_blocks.push_back(init_block(tc.width, config.mlp_ratio, K, rng));
  p.text_final_gain = Tensor::full({tc.width}, 1.0);
  p.text_final_bias = Tensor::zeros({tc.width});
  p.text_projection = normal_tensor({tc.width, config.shared_dim}, 1.0 / std::sqrt(static_cast<double>(tc.width)), rng);
  p.patch_weight = normal_tensor({vc.patch_dim(), vc.width}, 1.0 / std::sqrt(static_cast<double>(vc.patch_dim())), rng);
  p.patch_bias = Tensor::zeros({vc.width});
  p.class_token = normal_tensor({vc.width}, 0.1, rng);
  p.vision_positions = normal_tensor({1 + vc.num_patches(), vc.width}, 0.1, rng);
  for (std::size_t i = 0; i < K; ++i) p.vision_blocks.push_back(init_block(vc.width, config.mlp_ratio, K, rng));
  p.vision_final_gain = Tensor::full({vc.width}, 1.0);
  p.vision_final_bias = Tensor::zeros({vc.width});
  p.image_projection = normal_tensor({vc.width, config.shared_dim}, 1.0 / std::sqrt(static_cast<double>(vc.width)), rng);
  p.log_temperature = Tensor::scalar(std::log(config.init_temperature));
  return Backbone{config, std::move(p)};
}

double Backbone::temperature() const { return std::exp(params.log_temperature.item()); }

// Embeddings ---------------------------------------------------------------------

Tensor embed_text(const Backbone& backbone, std::span<const Caption> captions) {
  const auto& tc = backbone.config.text;
  if (captions.empty()) throw std::invalid_argument("embed_text: no captions");
  std::vector<int> ids;
  ids.reserve(captions.size() * tc.context_length);
  for (std::size_t n = 0; n < captions.size(); ++n) {
    if (captions[n].size() != tc.context_length) {
      throw std::invalid_argument("embed_text: caption " + std::to_string(n) + " has " +
                                  std::to_string(captions[n].size()) + " tokens, expected " +
                                  std::to_string(tc.context_length));
    }
    ids.insert(ids.end(), captions[n].begin(), captions[n].end());
  }
  Tensor tokens = reshape(embedding(backbone.params.token_embedding, ids),
                          {captions.size(), tc.context_length, tc.width});
  return add(tokens, backbone.params.text_positions);
}

std::vector<double> extract_patches(const Image& image, std::size_t patch_size) {
  if (patch_size == 0 || image.side % patch_size != 0) {
    throw std::invalid_argument("extract_patches: image side " + std::to_string(image.side) +
                                " not divisible by patch size " + std::to_string(patch_size));
  }
  if (image.pixels.size() != image.side * image.side * image.channels) {
    throw std::invalid_argument("extract_patches: pixel buffer does not match image dimensions");
  }
  const std::size_t per_side = image.side / patch_size;
  const std::size_t dim = patch_size * patch_size * image.channels;
  std::vector<double> out(per_side * per_side * dim);
  for (std::size_t py = 0; py < per_side; ++py) {
    for (std::size_t px = 0; px < per_side; ++px) {
      double* dst = out.data() + (py * per_side + px) * dim;
      for (std::size_t y = 0; y < patch_size; ++y) {
        const double* src = image.pixels.data() + ((py * patch_size + y) * image.side + px * patch_size) * image.channels;
        std::copy_n(src, patch_size * image.channels, dst + y * patch_size * image.channels);
      }
    }
  }
  return out;
}

ImageEmbedding embed_image(const Backbone& backbone, std::span<const Image> images) {
  const auto& vc = backbone.config.vision;
  const auto& p = backbone.params;
  if (images.empty()) throw std::invalid_argument("embed_image: no images");
  const std::size_t m = vc.num_patches();
  std::vector<double> patches;
  patches.reserve(images.size() * m * vc.patch_dim());
  for (const Image& img : images) {
    if (img.side != vc.image_side || img.channels != vc.channels) {
      throw std::invalid_argument("embed_image: image " + std::to_string(img.side) + "x" + std::to_string(img.side) +
                                  "x" + std::to_string(img.channels) + " does not match encoder " +
                                  std::to_string(vc.image_side) + "x" + std::to_string(vc.image_side) + "x" +
                                  std::to_string(vc.channels));
    }
    auto flat = extract_patches(img, vc.patch_size);
    patches.insert(patches.end(), flat.begin(), flat.end());
  }
  const std::size_t B = images.size();
  Tensor raw = Tensor::from({B, m, vc.patch_dim()}, std::move(patches));
  Tensor e0 = add(add(matmul(raw, p.patch_weight), p.patch_bias), slice(p.vision_positions, 0, 1, 1 + m));
  Tensor cls = add(reshape(p.class_token, {1, vc.width}), slice(p.vision_positions, 0, 0, 1));
  return {repeat_leading(cls, B), e0};
}

// Plain encoders -------------------------------------------------------------------

Tensor encode_text_plain(const Backbone& backbone, const Tensor& word_embeddings) {
  return run_blocks(backbone.params.text_blocks, backbone.config.text.heads, word_embeddings);
}

Tensor encode_image_plain(const Backbone& backbone, const ImageEmbedding& embedding) {
  Tensor x = concat({embedding.class_token, embedding.patches}, 1);
  x = run_blocks(backbone.params.vision_blocks, backbone.config.vision.heads, x);
  const std::size_t B = x.dim(0);
  return reshape(slice(x, 1, 0, 1), {B, backbone.config.vision.width});
}

std::size_t class_name_position(const Caption& caption) {
  for (std::size_t i = caption.size(); i-- > 0;) {
    if (caption[i] != 0) return i;
  }
  throw std::invalid_argument("class_name_position: caption holds only padding");
}

Tensor text_features(const Backbone& backbone, const Tensor& final_words, std::span<const Caption> captions) {
  const std::size_t N = final_words.dim(0);
  const std::size_t T = final_words.dim(1);
  const std::size_t D = final_words.dim(2);
  if (captions.size() != N) {
    throw std::invalid_argument("text_features: " + std::to_string(captions.size()) + " captions for " +
                                std::to_string(N) + " encoded sequences");
  }
  std::vector<std::size_t> rows(N);
  for (std::size_t n = 0; n < N; ++n) rows[n] = n * T + class_name_position(captions[n]);
  Tensor picked = index_select(reshape(final_words, {N * T, D}), 0, rows);
  const auto& p = backbone.params;
  return matmul(layer_norm(picked, p.text_final_gain, p.text_final_bias), p.text_projection);
}

Tensor image_features(const Backbone& backbone, const Tensor& final_class_token) {
  const auto& p = backbone.params;
  return matmul(layer_norm(final_class_token, p.vision_final_gain, p.vision_final_bias), p.image_projection);
}

// Classification ---------------------------------------------------------------------

Tensor cosine_logits(const Tensor& image_feats, const Tensor& class_feats, double temperature) {
  if (!(temperature > 0.0)) throw std::invalid_argument("cosine_logits: temperature must be positive");
  if (image_feats.rank() != 2 || class_feats.rank() != 2 || image_feats.dim(1) != class_feats.dim(1)) {
    throw ShapeError("cosine_logits: incompatible shapes " + shape_string(image_feats.shape()) + " and " +
                     shape_string(class_feats.shape()));
  }
  return scale(matmul(l2_normalize(image_feats), l2_normalize(class_feats), /*transpose_b=*/true), 1.0 / temperature);
}

Tensor classify(const Tensor& image_feats, const Tensor& class_feats, double temperature) {
  return softmax(cosine_logits(image_feats, class_feats, temperature), 1);
}

// Pretraining -------------------------------------------------------------------------

std::string PretrainConfig::canonical() const {
  std::ostringstream os;
  os.precision(17);
  os << "pretrain.batch_size=" << batch_size << "\n"
     << "pretrain.clip_norm=" << clip_norm << "\n"
     << "pretrain.learning_rate=" << learning_rate << "\n"
     << "pretrain.momentum=" << momentum << "\n"
     << "pretrain.schedule=" << (schedule == Schedule::Cosine ? "cosine" : "constant") << "\n"
     << "pretrain.steps=" << steps << "\n";
  return os.str();
}

Tensor contrastive_loss(const Tensor& image_feats, const Tensor& text_feats, const Tensor& log_temperature) {
  const std::size_t B = image_feats.dim(0);
  if (B < 2) throw std::invalid_argument("contrastive_loss: batch of " + std::to_string(B) + " is degenerate");
  Tensor sims = matmul(l2_normalize(image_feats), l2_normalize(text_feats), /*transpose_b=*/true);
  Tensor logits = mul(sims, exp(scale(log_temperature, -1.0)));
  static constexpr std::size_t kSwap[] = {1, 0};
  std::vector<double> targets(B * B, 0.0);
  for (std::size_t i = 0; i < B; ++i) targets[i * B + i] = 1.0;
  Tensor loss_i = soft_cross_entropy(logits, targets);
  Tensor loss_t = soft_cross_entropy(permute(logits, kSwap), targets);
  return scale(add(loss_i, loss_t), 0.5);
}

Backbone pretrain_contrastive(const BackboneConfig& config, std::span<const Image> images,
                              std::span<const Caption> captions, const PretrainConfig& train, PretrainLog* log) {
  if (train.batch_size < 2) {
    throw std::invalid_argument("pretrain_contrastive: batch size " + std::to_string(train.batch_size) +
                                " makes the contrastive loss degenerate");
  }
  if (images.size() != captions.size() || images.empty()) {
    throw std::invalid_argument("pretrain_contrastive: need equally many images and captions");
  }
  Backbone backbone = Backbone::initialize(config, train.seed);
  backbone.params.set_requires_grad(true);
  Sgd opt(backbone.params.parameters(), train.learning_rate, train.momentum);
  Rng rng(derive_seed(train.seed, 0xC11F));

  const std::size_t B = std::min(train.batch_size, images.size());
  std::vector<std::size_t> order(images.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  std::vector<Image> batch_images(B);
  std::vector<Caption> batch_captions(B);
  for (std::size_t step = 0; step < train.steps; ++step) {
    for (std::size_t b = 0; b < B; ++b) {
      if (cursor == order.size()) {
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        cursor = 0;
      }
      const std::size_t idx = order[cursor++];
      batch_images[b] = images[idx];
      batch_captions[b] = captions[idx];
    }
    // Items sharing a caption are all positives for each other.
    std::vector<double> targets(B * B, 0.0);
    for (std::size_t i = 0; i < B; ++i) {
      std::size_t count = 0;
      for (std::size_t j = 0; j < B; ++j) count += batch_captions[i] == batch_captions[j];
      for (std::size_t j = 0; j < B; ++j) {
        if (batch_captions[i] == batch_captions[j]) targets[i * B + j] = 1.0 / static_cast<double>(count);
      }
    }
    Tensor words = encode_text_plain(backbone, embed_text(backbone, batch_captions));
    Tensor z = text_features(backbone, words, batch_captions);
    Tensor x = image_features(backbone, encode_image_plain(backbone, embed_image(backbone, batch_images)));
    Tensor sims = matmul(l2_normalize(x), l2_normalize(z), /*transpose_b=*/true);
    Tensor logits = mul(sims, exp(scale(backbone.params.log_temperature, -1.0)));
    static constexpr std::size_t kSwap[] = {1, 0};
    Tensor loss = scale(add(soft_cross_entropy(logits, targets), soft_cross_entropy(permute(logits, kSwap), targets)), 0.5);
    if (!std::isfinite(loss.item())) {
      throw std::runtime_error("pretrain_contrastive: non-finite loss at step " + std::to_string(step));
    }
    if (log) log->losses.push_back(loss.item());
    opt.zero_grad();
    loss.backward();
    if (train.clip_norm > 0.0) clip_grad_norm(opt.params(), train.clip_norm);
    opt.step(scheduled_lr(train.learning_rate, train.schedule, step, train.steps));
    // Keep tau in [0.01, 1].
    auto lt = backbone.params.log_temperature.mutable_data();
    lt[0] = std::clamp(lt[0], std::log(0.01), 0.0);
  }
  backbone.params.set_requires_grad(false);
  return backbone;
}

}  // namespace bmip
