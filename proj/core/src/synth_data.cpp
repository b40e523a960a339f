#include "bmip/synth_data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "bmip/random.hpp"
#include "bmip/tensor.hpp"

namespace bmip {

namespace {

constexpr std::size_t kBlobsPerClass = 2;

// Stream tags for derive_seed; every random quantity has its own stream.
enum StreamTag : std::uint64_t {
  kPrototypeStream = 1,
  kTrainStream = 2,
  kTestStream = 3,
  kPretrainStream = 4,
  kSplitStream = 5,
  kShiftStream = 6,
  kTransferStream = 7,
};

int name_token_for(std::size_t label, double text_separation) {
  if (text_separation <= 0.0) return kFirstNameToken + static_cast<int>(label / 2);
  return kFirstNameToken + static_cast<int>(label);
}

int partner_of(int label, std::size_t classes) {
  const int partner = label ^ 1;
  return static_cast<std::size_t>(partner) < classes ? partner : label;
}

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

Image render(const ClassPrototype& proto, std::size_t side, double sigma, Rng& rng) {
  Image img;
  img.side = side;
  img.channels = 3;
  img.pixels.resize(side * side * 3);
  const double s = static_cast<double>(side);
  std::array<double, 3> bg = proto.background;
  for (double& c : bg) c = clamp01(c + rng.normal(0.0, 0.3 * sigma));
  std::vector<Blob> blobs = proto.blobs;
  for (Blob& b : blobs) {
    b.cx += rng.normal(0.0, 0.25 * s * sigma);
    b.cy += rng.normal(0.0, 0.25 * s * sigma);
    b.radius = std::max(0.5, b.radius * (1.0 + rng.normal(0.0, 0.3 * sigma)));
    for (double& c : b.color) c = clamp01(c + rng.normal(0.0, 0.5 * sigma));
  }
  for (std::size_t y = 0; y < side; ++y) {
    for (std::size_t x = 0; x < side; ++x) {
      std::array<double, 3> px = bg;
      for (const Blob& b : blobs) {
        const double dx = static_cast<double>(x) + 0.5 - b.cx;
        const double dy = static_cast<double>(y) + 0.5 - b.cy;
        const double alpha = std::exp(-(dx * dx + dy * dy) / (2.0 * b.radius * b.radius));
        for (std::size_t c = 0; c < 3; ++c) px[c] = px[c] * (1.0 - alpha) + b.color[c] * alpha;
      }
      for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = clamp01(px[c] + rng.normal(0.0, 0.3 * sigma));
    }
  }
  return img;
}

std::vector<LabeledExample> sample_examples(const SyntheticDataset& ds, std::size_t per_class, StreamTag tag) {
  std::vector<LabeledExample> out;
  out.reserve(per_class * ds.num_classes());
  for (std::size_t c = 0; c < ds.num_classes(); ++c) {
    for (std::size_t k = 0; k < per_class; ++k) {
      const std::uint64_t sample_seed = derive_seed(derive_seed(ds.spec.seed, tag), c * 1000003ULL + k);
      out.push_back({render_example(ds, static_cast<int>(c), sample_seed), ds.class_captions[c], static_cast<int>(c)});
    }
  }
  return out;
}

}  // namespace

void SyntheticSpec::validate() const {
  if (classes < 4) throw ConfigError("synthetic spec: need at least 4 classes, got " + std::to_string(classes));
  if (!(visual_variance >= 0.0)) throw ConfigError("synthetic spec: visual_variance must be >= 0");
  if (!(text_separation >= 0.0 && text_separation <= 1.0)) {
    throw ConfigError("synthetic spec: text_separation must lie in [0, 1]");
  }
  if (vocab_size < classes) {
    throw ConfigError("synthetic spec: vocabulary of " + std::to_string(vocab_size) + " is smaller than " +
                      std::to_string(classes) + " classes");
  }
  if (vocab_size < static_cast<std::size_t>(kFirstNameToken) + classes) {
    throw ConfigError("synthetic spec: vocabulary of " + std::to_string(vocab_size) + " cannot hold " +
                      std::to_string(kFirstNameToken) + " reserved tokens plus " + std::to_string(classes) +
                      " class names");
  }
  if (caption_length < std::size(kTemplateTokens) + 1) {
    throw ConfigError("synthetic spec: caption_length must fit the template and a class name");
  }
  if (image_side < 4) throw ConfigError("synthetic spec: image_side must be at least 4");
  if (train_shots == 0 || test_per_class == 0) throw ConfigError("synthetic spec: shot counts must be positive");
}

std::string SyntheticSpec::canonical() const {
  std::ostringstream os;
  os.precision(17);
  os << "data.caption_length=" << caption_length << "\n"
     << "data.classes=" << classes << "\n"
     << "data.image_side=" << image_side << "\n"
     << "data.seed=" << seed << "\n"
     << "data.test_per_class=" << test_per_class << "\n"
     << "data.text_separation=" << text_separation << "\n"
     << "data.train_shots=" << train_shots << "\n"
     << "data.visual_variance=" << visual_variance << "\n"
     << "data.vocab_size=" << vocab_size << "\n";
  return os.str();
}

Caption template_caption(int name_token, std::size_t caption_length) {
  Caption c(caption_length, kPadToken);
  std::size_t i = 0;
  for (int t : kTemplateTokens) c[i++] = t;
  c[i] = name_token;
  return c;
}

Image render_example(const SyntheticDataset& dataset, int label, std::uint64_t sample_seed) {
  Rng rng(sample_seed);
  return render(dataset.prototypes.at(static_cast<std::size_t>(label)), dataset.spec.image_side,
                dataset.spec.visual_variance, rng);
}

SyntheticDataset generate(const SyntheticSpec& spec) {
  spec.validate();
  SyntheticDataset ds;
  ds.spec = spec;
  Rng rng(derive_seed(spec.seed, kPrototypeStream));
  const double s = static_cast<double>(spec.image_side);
  for (std::size_t c = 0; c < spec.classes; ++c) {
    ClassPrototype p;
    for (double& v : p.background) v = rng.uniform(0.0, 0.4);
    for (std::size_t b = 0; b < kBlobsPerClass; ++b) {
      Blob blob;
      blob.cx = rng.uniform(0.2, 0.8) * s;
      blob.cy = rng.uniform(0.2, 0.8) * s;
      blob.radius = rng.uniform(0.1, 0.22) * s;
      for (double& v : blob.color) v = rng.uniform(0.2, 1.0);
      p.blobs.push_back(blob);
    }
    p.name_token = name_token_for(c, spec.text_separation);
    ds.prototypes.push_back(p);
    ds.class_captions.push_back(template_caption(p.name_token, spec.caption_length));
  }
  ds.train = sample_examples(ds, spec.train_shots, kTrainStream);
  ds.test = sample_examples(ds, spec.test_per_class, kTestStream);
  return ds;
}

PairedCorpus pretraining_corpus(const SyntheticDataset& dataset, std::size_t pairs_per_class) {
  PairedCorpus corpus;
  const std::size_t N = dataset.num_classes();
  const double swap_probability = 0.5 * (1.0 - dataset.spec.text_separation);
  for (std::size_t k = 0; k < pairs_per_class; ++k) {
    for (std::size_t c = 0; c < N; ++c) {
      const std::uint64_t seed = derive_seed(derive_seed(dataset.spec.seed, kPretrainStream), c * 1000003ULL + k);
      Rng caption_rng(derive_seed(seed, 0xCA));
      int name_class = static_cast<int>(c);
      if (caption_rng.uniform() < swap_probability) name_class = partner_of(name_class, N);
      corpus.images.push_back(render_example(dataset, static_cast<int>(c), seed));
      corpus.captions.push_back(dataset.class_captions[static_cast<std::size_t>(name_class)]);
      corpus.labels.push_back(static_cast<int>(c));
    }
  }
  return corpus;
}

BaseNewSplit split_base_new(const SyntheticDataset& dataset, double fraction) {
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw std::invalid_argument("split_base_new: fraction must lie in (0, 1)");
  }
  const std::size_t N = dataset.num_classes();
  const auto n_base = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(N)));
  if (n_base == 0 || n_base >= N) {
    throw std::invalid_argument("split_base_new: fraction " + std::to_string(fraction) + " leaves an empty side for " +
                                std::to_string(N) + " classes");
  }
  std::vector<int> order(N);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(dataset.spec.seed, kSplitStream));
  for (std::size_t i = N; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  BaseNewSplit split;
  split.base.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_base));
  split.novel.assign(order.begin() + static_cast<std::ptrdiff_t>(n_base), order.end());
  std::sort(split.base.begin(), split.base.end());
  std::sort(split.novel.begin(), split.novel.end());
  return split;
}

std::vector<LabeledExample> select_classes(const std::vector<LabeledExample>& examples, const std::vector<int>& classes) {
  std::vector<LabeledExample> out;
  for (const auto& ex : examples) {
    if (std::find(classes.begin(), classes.end(), ex.label) != classes.end()) out.push_back(ex);
  }
  return out;
}

ShiftKind parse_shift(std::string_view name) {
  if (name == "brightness") return ShiftKind::Brightness;
  if (name == "noise") return ShiftKind::Noise;
  if (name == "style-permutation") return ShiftKind::StylePermutation;
  throw std::invalid_argument("unknown shift '" + std::string(name) +
                              "' (expected brightness, noise, or style-permutation)");
}

std::string_view shift_name(ShiftKind kind) {
  switch (kind) {
    case ShiftKind::Brightness: return "brightness";
    case ShiftKind::Noise: return "noise";
    case ShiftKind::StylePermutation: return "style-permutation";
  }
  return "unknown";
}

SyntheticDataset make_shifted_variant(const SyntheticDataset& dataset, ShiftKind kind, double magnitude) {
  if (!(magnitude >= 0.0)) throw std::invalid_argument("make_shifted_variant: magnitude must be >= 0");
  SyntheticDataset out = dataset;
  if (magnitude == 0.0) return out;
  std::uint64_t counter = 0;
  auto apply = [&](Image& img) {
    Rng rng(derive_seed(derive_seed(dataset.spec.seed, kShiftStream), counter++));
    const double t = std::min(magnitude, 1.0);
    const std::vector<double> original = img.pixels;
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
      double& v = img.pixels[i];
      switch (kind) {
        case ShiftKind::Brightness:
          v = clamp01(v + magnitude);
          break;
        case ShiftKind::Noise:
          v = clamp01(v + rng.normal(0.0, magnitude));
          break;
        case ShiftKind::StylePermutation: {
          // Blend toward the RGB -> GBR channel rotation.
          const std::size_t c = i % img.channels;
          const double rotated = original[i - c + (c + 1) % img.channels];
          v = clamp01((1.0 - t) * v + t * rotated);
          break;
        }
      }
    }
  };
  for (auto& ex : out.train) apply(ex.image);
  for (auto& ex : out.test) apply(ex.image);
  return out;
}

SyntheticDataset make_transfer_target(const SyntheticDataset& source, std::size_t index, double visual_variance) {
  SyntheticDataset out;
  out.spec = source.spec;
  out.spec.visual_variance = visual_variance;
  out.spec.seed = derive_seed(source.spec.seed, kTransferStream * 1000 + index);
  out.spec.validate();
  const std::size_t N = source.num_classes();
  std::vector<std::size_t> perm(N);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(out.spec.seed);
  for (std::size_t i = N; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  for (std::size_t c = 0; c < N; ++c) {
    out.prototypes.push_back(source.prototypes[perm[c]]);
    out.class_captions.push_back(source.class_captions[perm[c]]);
  }
  out.train = sample_examples(out, out.spec.train_shots, kTrainStream);
  out.test = sample_examples(out, out.spec.test_per_class, kTestStream);
  return out;
}

void export_records(const SyntheticDataset& dataset, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("export_records: cannot open " + path.string());
  char buf[32];
  auto write = [&](const char* split, const LabeledExample& ex) {
    os << split << '\t' << ex.label << '\t';
    for (std::size_t i = 0; i < ex.caption.size(); ++i) os << (i ? " " : "") << ex.caption[i];
    os << '\t';
    for (std::size_t i = 0; i < ex.image.pixels.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.17g", ex.image.pixels[i]);
      os << (i ? " " : "") << buf;
    }
    os << '\n';
  };
  for (const auto& ex : dataset.train) write("train", ex);
  for (const auto& ex : dataset.test) write("test", ex);
}

double mean_within_class_variance(const std::vector<LabeledExample>& examples, std::size_t classes) {
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    std::vector<const Image*> members;
    for (const auto& ex : examples) {
      if (ex.label == static_cast<int>(c)) members.push_back(&ex.image);
    }
    if (members.size() < 2) continue;
    const std::size_t P = members.front()->pixels.size();
    double acc = 0.0;
    for (std::size_t i = 0; i < P; ++i) {
      double mu = 0.0;
      for (const Image* img : members) mu += img->pixels[i];
      mu /= static_cast<double>(members.size());
      double var = 0.0;
      for (const Image* img : members) var += (img->pixels[i] - mu) * (img->pixels[i] - mu);
      acc += var / static_cast<double>(members.size());
    }
    total += acc / static_cast<double>(P);
    ++counted;
  }
  return counted ? total / static_cast<double>(counted) : 0.0;
}

}  // namespace bmip
