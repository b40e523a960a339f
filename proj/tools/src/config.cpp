#include "bmip/cli/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "bmip/digest.hpp"

namespace bmip::cli {

namespace {

std::string trim(std::string s) {
  const auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(text);
  while (std::getline(is, item, sep)) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

[[noreturn]] void bad_value(const std::string& field, const std::string& expected, const std::string& got) {
  throw ConfigError(field + ": expected " + expected + ", got '" + got + "'");
}

std::string fmt(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

std::uint64_t parse_u64(const std::string& field, const std::string& s) {
  std::uint64_t v = 0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || end != s.data() + s.size() || s.empty()) bad_value(field, "an unsigned integer", s);
  return v;
}

double parse_f64(const std::string& field, const std::string& s) {
  double v = 0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || end != s.data() + s.size() || s.empty()) bad_value(field, "a number", s);
  return v;
}

bool parse_bool(const std::string& field, const std::string& s) {
  if (s == "true" || s == "yes" || s == "1") return true;
  if (s == "false" || s == "no" || s == "0") return false;
  bad_value(field, "true or false", s);
}

Schedule parse_schedule(const std::string& field, const std::string& s) {
  if (s == "cosine") return Schedule::Cosine;
  if (s == "constant") return Schedule::Constant;
  bad_value(field, "cosine or constant", s);
}

std::string schedule_text(Schedule s) { return s == Schedule::Cosine ? "cosine" : "constant"; }

Protocol parse_protocol(const std::string& field, const std::string& s) {
  for (Protocol p : {Protocol::OpenWorld, Protocol::CrossDataset, Protocol::Domain}) {
    if (protocol_name(p) == s) return p;
  }
  bad_value(field, "open_world, cross_dataset, or domain", s);
}

ShiftSpec parse_shift_spec(const std::string& field, const std::string& s) {
  const auto at = s.find('@');
  if (at == std::string::npos) bad_value(field, "kind@magnitude", s);
  try {
    return {parse_shift(s.substr(0, at)), parse_f64(field, s.substr(at + 1))};
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
    bad_value(field, "brightness, noise, or style-permutation before '@'", s);
  }
}

template <class T, class F>
std::string join(const std::vector<T>& items, F&& render) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? "," : "") + render(items[i]);
  return out;
}

// One configurable field, bound to a config instance.
struct Field {
  std::string section;
  std::string key;
  bool digested;
  std::function<std::string()> get;
  std::function<void(const std::string&)> set;

  std::string name() const { return section + "." + key; }
};

template <class T>
Field count_field(std::string section, std::string key, T& ref) {
  const std::string name = section + "." + key;
  return {std::move(section), std::move(key), true, [&ref] { return std::to_string(ref); },
          [&ref, name](const std::string& v) { ref = static_cast<T>(parse_u64(name, v)); }};
}

Field real_field(std::string section, std::string key, double& ref) {
  const std::string name = section + "." + key;
  return {std::move(section), std::move(key), true, [&ref] { return fmt(ref); },
          [&ref, name](const std::string& v) { ref = parse_f64(name, v); }};
}

Field flag_field(std::string section, std::string key, bool& ref) {
  const std::string name = section + "." + key;
  return {std::move(section), std::move(key), true, [&ref] { return std::string(ref ? "true" : "false"); },
          [&ref, name](const std::string& v) { ref = parse_bool(name, v); }};
}

Field schedule_field(std::string section, Schedule& ref) {
  const std::string name = section + ".schedule";
  return {std::move(section), "schedule", true, [&ref] { return schedule_text(ref); },
          [&ref, name](const std::string& v) { ref = parse_schedule(name, v); }};
}

// Every field, in rendering order. Backbone context length, vocabulary, and
// image side are tied to the data section and not separately settable.
std::vector<Field> fields(ExperimentConfig& c) {
  std::vector<Field> f = {
      count_field("data", "classes", c.data.classes),
      count_field("data", "train_shots", c.data.train_shots),
      count_field("data", "test_per_class", c.data.test_per_class),
      real_field("data", "visual_variance", c.data.visual_variance),
      real_field("data", "text_separation", c.data.text_separation),
      count_field("data", "image_side", c.data.image_side),
      count_field("data", "vocab_size", c.data.vocab_size),
      count_field("data", "caption_length", c.data.caption_length),

      count_field("backbone", "depth", c.backbone.text.depth),
      count_field("backbone", "text_width", c.backbone.text.width),
      count_field("backbone", "text_heads", c.backbone.text.heads),
      count_field("backbone", "vision_width", c.backbone.vision.width),
      count_field("backbone", "vision_heads", c.backbone.vision.heads),
      count_field("backbone", "patch_size", c.backbone.vision.patch_size),
      count_field("backbone", "shared_dim", c.backbone.shared_dim),
      count_field("backbone", "mlp_ratio", c.backbone.mlp_ratio),
      real_field("backbone", "init_temperature", c.backbone.init_temperature),

      count_field("pretrain", "steps", c.pretrain.steps),
      count_field("pretrain", "batch_size", c.pretrain.batch_size),
      real_field("pretrain", "learning_rate", c.pretrain.learning_rate),
      real_field("pretrain", "momentum", c.pretrain.momentum),
      real_field("pretrain", "clip_norm", c.pretrain.clip_norm),
      schedule_field("pretrain", c.pretrain.schedule),
      count_field("pretrain", "pairs_per_class", c.pairs_per_class),

      Field{"train", "aggregation", true, [&c] { return std::string(strategy_name(c.train.strategy)); },
            [&c](const std::string& v) {
              try {
                c.train.strategy = parse_strategy(v);
              } catch (const ConfigError& e) {
                throw ConfigError(std::string("train.aggregation: ") + e.what());
              }
            }},
      count_field("train", "epochs", c.train.epochs),
      count_field("train", "batch_size", c.train.batch_size),
      real_field("train", "learning_rate", c.train.learning_rate),
      real_field("train", "momentum", c.train.momentum),
      schedule_field("train", c.train.schedule),

      count_field("prompt", "depth", c.train.depth),
      count_field("prompt", "length", c.train.length),

      flag_field("interaction", "per_depth_gates", c.train.interaction.per_depth_gates),
      flag_field("interaction", "shared_heads", c.train.interaction.shared_heads),
      real_field("interaction", "gate_weight_init", c.train.interaction.gate_weight_init),
      real_field("interaction", "gate_bias_init", c.train.interaction.gate_bias_init),

      Field{"eval", "protocols", true,
            [&c] { return join(c.eval.protocols, [](Protocol p) { return std::string(protocol_name(p)); }); },
            [&c](const std::string& v) {
              c.eval.protocols.clear();
              for (const auto& item : split(v, ',')) c.eval.protocols.push_back(parse_protocol("eval.protocols", item));
            }},
      real_field("eval", "base_fraction", c.eval.base_fraction),
      count_field("eval", "transfer_targets", c.eval.transfer_targets),
      real_field("eval", "transfer_visual_variance", c.eval.transfer_visual_variance),
      Field{"eval", "shifts", true, [&c] { return join(c.eval.shifts, [](const ShiftSpec& s) { return std::string(shift_name(s.kind)) + "@" + fmt(s.magnitude); }); },
            [&c](const std::string& v) {
              c.eval.shifts.clear();
              for (const auto& item : split(v, ',')) c.eval.shifts.push_back(parse_shift_spec("eval.shifts", item));
            }},

      Field{"run", "seeds", false,
            [&c] { return join(c.seeds, [](std::uint64_t s) { return std::to_string(s); }); },
            [&c](const std::string& v) {
              try {
                c.seeds = parse_seed_list(v);
              } catch (const ConfigError& e) {
                throw ConfigError(std::string("run.seeds: ") + e.what());
              }
            }},
      Field{"run", "workers", false, [&c] { return std::to_string(c.workers); },
            [&c](const std::string& v) { c.workers = parse_u64("run.workers", v); }},
  };
  return f;
}

// Copies the data-owned extents into the backbone.
void tie_backbone(ExperimentConfig& c) {
  c.backbone.vision.depth = c.backbone.text.depth;
  c.backbone.text.context_length = c.data.caption_length;
  c.backbone.text.vocab_size = c.data.vocab_size;
  c.backbone.vision.image_side = c.data.image_side;
}

}  // namespace

std::string_view protocol_name(Protocol p) {
  switch (p) {
    case Protocol::OpenWorld: return "open_world";
    case Protocol::CrossDataset: return "cross_dataset";
    case Protocol::Domain: return "domain";
  }
  return "unknown";
}

bool EvalConfig::wants(Protocol p) const { return std::find(protocols.begin(), protocols.end(), p) != protocols.end(); }

void ExperimentConfig::validate() const {
  data.validate();
  backbone.validate();
  if (backbone.text.context_length != data.caption_length || backbone.text.vocab_size != data.vocab_size ||
      backbone.vision.image_side != data.image_side) {
    throw ConfigError("backbone: context length, vocabulary, and image side must follow the data section");
  }
  if (pretrain.steps == 0) throw ConfigError("pretrain.steps must be at least 1");
  if (pretrain.batch_size < 2) throw ConfigError("pretrain.batch_size must be at least 2");
  if (!(pretrain.learning_rate >= 0.0)) throw ConfigError("pretrain.learning_rate must be >= 0");
  if (!(pretrain.momentum >= 0.0 && pretrain.momentum < 1.0)) throw ConfigError("pretrain.momentum must lie in [0, 1)");
  if (!(pretrain.clip_norm >= 0.0)) throw ConfigError("pretrain.clip_norm must be >= 0");
  if (pairs_per_class == 0) throw ConfigError("pretrain.pairs_per_class must be at least 1");
  train.validate();
  if (train.depth > backbone.depth()) {
    throw ConfigError("prompt.depth " + std::to_string(train.depth) + " exceeds backbone.depth " +
                      std::to_string(backbone.depth()));
  }
  if (eval.protocols.empty()) throw ConfigError("eval.protocols must name at least one protocol");
  if (!(eval.base_fraction > 0.0 && eval.base_fraction < 1.0)) {
    throw ConfigError("eval.base_fraction must lie strictly between 0 and 1");
  }
  if (eval.wants(Protocol::CrossDataset) && eval.transfer_targets == 0) {
    throw ConfigError("eval.transfer_targets must be at least 1 when cross_dataset is requested");
  }
  if (!(eval.transfer_visual_variance >= 0.0)) throw ConfigError("eval.transfer_visual_variance must be >= 0");
  if (eval.wants(Protocol::Domain) && eval.shifts.empty()) {
    throw ConfigError("eval.shifts must list at least one shift when domain is requested");
  }
  for (const auto& s : eval.shifts) {
    if (!(s.magnitude >= 0.0)) throw ConfigError("eval.shifts: magnitude of " + s.name() + " must be >= 0");
  }
  if (seeds.empty()) throw ConfigError("run.seeds must list at least one seed");
  if (workers == 0) throw ConfigError("run.workers must be at least 1");
}

std::string ExperimentConfig::canonical() const {
  ExperimentConfig copy = *this;
  std::vector<std::string> lines;
  for (const Field& f : fields(copy)) {
    if (f.digested) lines.push_back(f.name() + "=" + f.get());
  }
  std::sort(lines.begin(), lines.end());
  std::string out;
  for (const auto& l : lines) out += l + "\n";
  return out;
}

std::uint64_t ExperimentConfig::digest_value() const { return Fnv1a().text(canonical()).value(); }

std::string ExperimentConfig::digest() const { return digest_hex(digest_value()); }

ExperimentConfig parse_config(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream is(text);
  try {
    pt::ini_parser::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  ExperimentConfig c;
  std::vector<Field> registry = fields(c);
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) {
      throw ConfigError("config: key '" + section + "' lies outside any [section]");
    }
    for (const auto& [key, value] : body) {
      auto it = std::find_if(registry.begin(), registry.end(),
                             [&](const Field& f) { return f.section == section && f.key == key; });
      if (it == registry.end()) throw ConfigError("config: unknown field '" + section + "." + key + "'");
      it->set(trim(value.data()));
    }
  }
  tie_backbone(c);
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("config: cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

std::string to_ini(const ExperimentConfig& config) {
  ExperimentConfig copy = config;
  std::ostringstream os;
  std::string section;
  for (const Field& f : fields(copy)) {
    if (f.section != section) {
      os << (section.empty() ? "" : "\n") << "[" << f.section << "]\n";
      section = f.section;
    }
    os << f.key << " = " << f.get() << "\n";
  }
  return os.str();
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> out;
  for (const auto& item : split(text, ',')) {
    const auto dash = item.find('-');
    if (dash == std::string::npos) {
      out.push_back(parse_u64("seed", item));
      continue;
    }
    const std::uint64_t lo = parse_u64("seed range", trim(item.substr(0, dash)));
    const std::uint64_t hi = parse_u64("seed range", trim(item.substr(dash + 1)));
    if (hi < lo || hi - lo > 10000) bad_value("seed range", "lo-hi with lo <= hi", item);
    for (std::uint64_t s = lo; s <= hi; ++s) out.push_back(s);
  }
  if (out.empty()) throw ConfigError("empty seed list");
  std::set<std::uint64_t> unique(out.begin(), out.end());
  if (unique.size() != out.size()) throw ConfigError("seed list '" + text + "' repeats a seed");
  return out;
}

std::vector<Strategy> parse_strategy_list(const std::string& text) {
  std::vector<Strategy> out;
  for (const auto& item : split(text, ',')) out.push_back(parse_strategy(item));
  if (out.empty()) throw ConfigError("empty strategy list");
  return out;
}

}  // namespace bmip::cli
