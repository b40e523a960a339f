#include "bmip/train_eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

#include "bmip/random.hpp"

namespace bmip {

using nlohmann::json;

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("train.epochs must be at least 1");
  if (batch_size == 0) throw ConfigError("train.batch_size must be at least 1");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("train.learning_rate must be a finite value >= 0");
  }
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train.momentum must lie in [0, 1)");
  if (length == 0) throw ConfigError("prompt.length must be at least 1");
}

std::string TrainConfig::canonical() const {
  std::ostringstream os;
  os.precision(17);
  os << "train.aggregation=" << strategy_name(strategy) << "\n"
     << "train.batch_size=" << batch_size << "\n"
     << "train.epochs=" << epochs << "\n"
     << "train.learning_rate=" << learning_rate << "\n"
     << "train.momentum=" << momentum << "\n"
     << "train.schedule=" << (schedule == Schedule::Cosine ? "cosine" : "constant") << "\n"
     << "prompt.depth=" << depth << "\n"
     << "prompt.length=" << length << "\n"
     << interaction.canonical();
  return os.str();
}

LabelSpace LabelSpace::of(const SyntheticDataset& dataset, const std::vector<int>& classes) {
  LabelSpace space;
  for (int c : classes) {
    if (c < 0 || static_cast<std::size_t>(c) >= dataset.num_classes()) {
      throw std::invalid_argument("label space: class " + std::to_string(c) + " not in dataset");
    }
    space.classes.push_back(c);
    space.captions.push_back(dataset.class_captions[static_cast<std::size_t>(c)]);
  }
  return space;
}

LabelSpace LabelSpace::all(const SyntheticDataset& dataset) {
  std::vector<int> classes(dataset.num_classes());
  std::iota(classes.begin(), classes.end(), 0);
  return of(dataset, classes);
}

std::size_t LabelSpace::index_of(int label) const {
  auto it = std::find(classes.begin(), classes.end(), label);
  if (it == classes.end()) throw std::invalid_argument("class " + std::to_string(label) + " outside the label space");
  return static_cast<std::size_t>(it - classes.begin());
}

namespace {

constexpr std::size_t kEvalChunk = 128;

std::vector<int> local_labels(const std::vector<LabeledExample>& examples, const LabelSpace& space) {
  std::vector<int> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) out.push_back(static_cast<int>(space.index_of(ex.label)));
  return out;
}

Tensor batch_loss(const Backbone& backbone, const PromptModel& model, std::span<const Image> images,
                  std::span<const int> labels, const LabelSpace& space) {
  Tensor z = prompted_class_features(backbone, model, space.captions);
  Tensor x = prompted_image_features(backbone, model, images);
  return cross_entropy(cosine_logits(x, z, backbone.temperature()), labels);
}

}  // namespace

double training_loss(const Backbone& backbone, const PromptModel& model, const std::vector<LabeledExample>& examples,
                     const LabelSpace& space) {
  if (examples.empty()) throw std::invalid_argument("training_loss: no examples");
  NoGradGuard no_grad;
  std::vector<Image> images;
  for (const auto& ex : examples) images.push_back(ex.image);
  const auto labels = local_labels(examples, space);
  return batch_loss(backbone, model, images, labels, space).item();
}

PromptModel tune_prompts(const Backbone& backbone, PromptModel model, const std::vector<LabeledExample>& train,
                         const LabelSpace& space, const TrainConfig& config, TrainLog* log) {
  config.validate();
  if (train.empty()) throw std::invalid_argument("tune_prompts: empty training set");
  const auto labels = local_labels(train, space);
  TrainLog local;
  local.initial_loss = training_loss(backbone, model, train, space);

  Sgd opt(model.parameters(), config.learning_rate, config.momentum);
  Rng rng(derive_seed(config.seed, 0x7E));
  const std::size_t B = std::min(config.batch_size, train.size());
  const std::size_t steps_per_epoch = (train.size() + B - 1) / B;
  const std::size_t total = steps_per_epoch * config.epochs;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += B) {
      const std::size_t end = std::min(start + B, order.size());
      std::vector<Image> images;
      std::vector<int> batch_labels;
      for (std::size_t k = start; k < end; ++k) {
        images.push_back(train[order[k]].image);
        batch_labels.push_back(labels[order[k]]);
      }
      Tensor loss = batch_loss(backbone, model, images, batch_labels, space);
      if (!std::isfinite(loss.item())) {
        throw std::runtime_error("tune_prompts: non-finite loss at step " + std::to_string(step));
      }
      epoch_loss += loss.item();
      opt.zero_grad();
      loss.backward();
      opt.step(scheduled_lr(config.learning_rate, config.schedule, step, total));
      ++step;
    }
    local.epoch_losses.push_back(epoch_loss / static_cast<double>(steps_per_epoch));
  }
  local.steps = step;
  local.final_loss = training_loss(backbone, model, train, space);
  if (log) *log = std::move(local);
  return model;
}

// Metrics -----------------------------------------------------------------------------

std::size_t argmax(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("argmax: empty input");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

std::vector<int> predict(const Backbone& backbone, const PromptModel& model, std::span<const Image> images,
                         const LabelSpace& space) {
  NoGradGuard no_grad;
  Tensor z = prompted_class_features(backbone, model, space.captions);
  const std::size_t N = space.classes.size();
  std::vector<int> out;
  out.reserve(images.size());
  for (std::size_t start = 0; start < images.size(); start += kEvalChunk) {
    const auto chunk = images.subspan(start, std::min(kEvalChunk, images.size() - start));
    Tensor logits = cosine_logits(prompted_image_features(backbone, model, chunk), z, backbone.temperature());
    const auto v = logits.data();
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      out.push_back(space.classes[argmax(v.subspan(i * N, N))]);
    }
  }
  return out;
}

double harmonic_mean(double base_acc, double new_acc) {
  if (base_acc <= 0.0 || new_acc <= 0.0) return 0.0;
  return 2.0 * base_acc * new_acc / (base_acc + new_acc);
}

double accuracy(std::span<const int> predicted, std::span<const int> labels) {
  if (labels.empty()) throw std::invalid_argument("accuracy: empty data");
  if (predicted.size() != labels.size()) throw std::invalid_argument("accuracy: prediction count differs from labels");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predicted[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

namespace {

std::vector<Image> images_of(const std::vector<LabeledExample>& examples) {
  std::vector<Image> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) out.push_back(ex.image);
  return out;
}

std::vector<int> labels_of(const std::vector<LabeledExample>& examples) {
  std::vector<int> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) out.push_back(ex.label);
  return out;
}

}  // namespace

double eval_closed(const Backbone& backbone, const PromptModel& model, const std::vector<LabeledExample>& examples,
                   const LabelSpace& space) {
  if (examples.empty()) throw std::invalid_argument("eval_closed: empty data");
  for (const auto& ex : examples) space.index_of(ex.label);
  const auto labels = labels_of(examples);
  return accuracy(predict(backbone, model, images_of(examples), space), labels);
}

OpenWorldResult score_open_world(std::span<const int> base_predicted, std::span<const int> base_labels,
                                 std::span<const int> new_predicted, std::span<const int> new_labels) {
  std::set<int> base_set(base_labels.begin(), base_labels.end());
  for (int c : new_labels) {
    if (base_set.count(c)) throw std::invalid_argument("open-world: class " + std::to_string(c) + " is both base and new");
  }
  OpenWorldResult r;
  r.base_acc = accuracy(base_predicted, base_labels);
  r.new_acc = accuracy(new_predicted, new_labels);
  r.hm = harmonic_mean(r.base_acc, r.new_acc);
  r.base_count = base_labels.size();
  r.new_count = new_labels.size();
  std::size_t hits = 0;
  std::map<int, std::pair<std::size_t, std::size_t>> tally;  // class -> (hits, total)
  auto count = [&](std::span<const int> pred, std::span<const int> labels) {
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const bool hit = pred[i] == labels[i];
      hits += hit;
      auto& t = tally[labels[i]];
      t.first += hit;
      ++t.second;
    }
  };
  count(base_predicted, base_labels);
  count(new_predicted, new_labels);
  r.open_world_acc = static_cast<double>(hits) / static_cast<double>(r.base_count + r.new_count);
  for (auto& [c, t] : tally) r.per_class[c] = static_cast<double>(t.first) / static_cast<double>(t.second);
  return r;
}

OpenWorldResult eval_open_world(const Backbone& backbone, const PromptModel& model, const SyntheticDataset& dataset,
                                const BaseNewSplit& split) {
  std::set<int> base(split.base.begin(), split.base.end());
  for (int c : split.novel) {
    if (base.count(c)) throw std::invalid_argument("eval_open_world: class " + std::to_string(c) + " is both base and new");
  }
  std::vector<int> all = split.base;
  all.insert(all.end(), split.novel.begin(), split.novel.end());
  std::sort(all.begin(), all.end());
  const LabelSpace space = LabelSpace::of(dataset, all);
  const auto base_test = select_classes(dataset.test, split.base);
  const auto new_test = select_classes(dataset.test, split.novel);
  const auto base_pred = predict(backbone, model, images_of(base_test), space);
  const auto new_pred = predict(backbone, model, images_of(new_test), space);
  return score_open_world(base_pred, labels_of(base_test), new_pred, labels_of(new_test));
}

std::vector<double> eval_cross_dataset(const Backbone& backbone, const PromptModel& model,
                                       const std::vector<SyntheticDataset>& targets) {
  std::vector<double> out;
  for (const auto& target : targets) out.push_back(eval_closed(backbone, model, target.test, LabelSpace::all(target)));
  return out;
}

std::string ShiftSpec::name() const {
  std::ostringstream os;
  os << shift_name(kind) << "@" << magnitude;
  return os.str();
}

DomainResult eval_domain_generalization(const Backbone& backbone, const PromptModel& model,
                                        const SyntheticDataset& source, const std::vector<ShiftSpec>& shifts) {
  const LabelSpace space = LabelSpace::all(source);
  DomainResult r;
  r.source_acc = eval_closed(backbone, model, source.test, space);
  for (const auto& s : shifts) {
    r.variant_acc.push_back(eval_closed(backbone, model, make_shifted_variant(source, s.kind, s.magnitude).test, space));
  }
  if (!r.variant_acc.empty()) {
    r.ood_average = std::accumulate(r.variant_acc.begin(), r.variant_acc.end(), 0.0) /
                    static_cast<double>(r.variant_acc.size());
  }
  return r;
}

TrainConfig continuation_config(const TrainConfig& config) {
  TrainConfig c = config;
  c.learning_rate = config.learning_rate * 0.1;
  c.epochs = 5;
  return c;
}

CorollaryResult corollary1_experiment(const Backbone& backbone, const std::vector<LabeledExample>& train,
                                      const LabelSpace& space, const TrainConfig& config,
                                      const TrainConfig& continuation) {
  CorollaryResult r;
  TrainConfig arm_a = config;
  arm_a.strategy = Strategy::Independent;
  PromptModel independent = PromptModel::initialize(backbone.config, Strategy::Independent, config.depth,
                                                    config.length, config.interaction, config.seed);
  independent = tune_prompts(backbone, std::move(independent), train, space, arm_a, &r.independent_log);
  r.loss_independent = r.independent_log.final_loss;

  PromptModel bmip = PromptModel::initialize(backbone.config, Strategy::Bmip, config.depth, config.length,
                                             config.interaction, config.seed);
  const PromptModel solved = independent.clone();
  bmip.language = solved.language;
  bmip.vision = solved.vision;
  saturate_gates(bmip, kSaturatedGateLogit);
  TrainConfig arm_b = continuation;
  arm_b.strategy = Strategy::Bmip;
  bmip = tune_prompts(backbone, std::move(bmip), train, space, arm_b, &r.bmip_log);
  r.loss_bmip_initial = r.bmip_log.initial_loss;
  r.loss_bmip_from_saturated_init = r.bmip_log.final_loss;
  return r;
}

// Reports ---------------------------------------------------------------------------------

std::string SeedRecord::to_text() const {
  json j;
  j["seed"] = seed;
  j["strategy"] = strategy;
  j["config_digest"] = config_digest;
  j["backbone_digest"] = backbone_digest;
  j["prompt_digest"] = prompt_digest;
  j["metrics"] = metrics;
  return j.dump(2) + "\n";
}

SeedRecord SeedRecord::from_text(const std::string& text) {
  const json j = json::parse(text);
  SeedRecord r;
  r.seed = j.at("seed").get<std::uint64_t>();
  r.strategy = j.at("strategy").get<std::string>();
  r.config_digest = j.at("config_digest").get<std::string>();
  r.backbone_digest = j.at("backbone_digest").get<std::string>();
  r.prompt_digest = j.at("prompt_digest").get<std::string>();
  r.metrics = j.at("metrics").get<std::map<std::string, double>>();
  return r;
}

Summary summarize(std::span<const double> values) {
  Summary s;
  s.count = values.size();
  if (values.empty()) return s;
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return s;
}

EvalReport EvalReport::from_records(const std::vector<SeedRecord>& records) {
  if (records.empty()) throw std::invalid_argument("report: no seed records");
  EvalReport r;
  r.strategy = records.front().strategy;
  r.config_digest = records.front().config_digest;
  for (const auto& rec : records) {
    if (rec.strategy != r.strategy) throw std::invalid_argument("report: records mix strategies");
    if (rec.config_digest != r.config_digest) {
      throw std::invalid_argument("report: seed " + std::to_string(rec.seed) + " has config digest " +
                                  rec.config_digest + ", expected " + r.config_digest);
    }
    r.seeds.push_back(rec.seed);
  }
  for (const auto& [key, value] : records.front().metrics) {
    std::vector<double> values;
    for (const auto& rec : records) {
      auto it = rec.metrics.find(key);
      if (it == rec.metrics.end()) break;
      values.push_back(it->second);
    }
    if (values.size() != records.size()) continue;
    r.summaries[key] = summarize(values);
    r.series[key] = std::move(values);
  }
  return r;
}

std::string EvalReport::to_text() const {
  json j;
  j["strategy"] = strategy;
  j["config_digest"] = config_digest;
  j["seeds"] = seeds;
  j["flags"] = flags;
  json metrics = json::object();
  for (const auto& [key, values] : series) {
    const Summary& s = summaries.at(key);
    metrics[key] = {{"mean", s.mean}, {"std", s.stddev}, {"values", values}};
  }
  j["metrics"] = metrics;
  return j.dump(2) + "\n";
}

EvalReport EvalReport::from_text(const std::string& text) {
  const json j = json::parse(text);
  EvalReport r;
  r.strategy = j.at("strategy").get<std::string>();
  r.config_digest = j.at("config_digest").get<std::string>();
  r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  r.flags = j.at("flags").get<std::vector<std::string>>();
  for (const auto& [key, m] : j.at("metrics").items()) {
    r.series[key] = m.at("values").get<std::vector<double>>();
    r.summaries[key] = Summary{m.at("mean").get<double>(), m.at("std").get<double>(), r.series[key].size()};
  }
  return r;
}

std::string DirectionalCheck::describe() const {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%s: %s - %s = %+.4f vs pooled SE %.4f (%s)", metric.c_str(), leader.c_str(),
                rival.c_str(), margin, pooled_se, met() ? "met" : "not met");
  return buf;
}

DirectionalCheck directional_check(const EvalReport& leader, const EvalReport& rival, const std::string& metric) {
  auto series = [&metric](const EvalReport& r) -> const std::vector<double>& {
    auto it = r.series.find(metric);
    if (it == r.series.end()) throw std::invalid_argument("directional check: " + r.strategy + " lacks " + metric);
    if (it->second.size() < 2) throw std::invalid_argument("directional check: " + r.strategy + " has fewer than two seeds");
    return it->second;
  };
  const auto& a = series(leader);
  const auto& b = series(rival);
  const Summary sa = summarize(a);
  const Summary sb = summarize(b);
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  const double pooled_var =
      ((na - 1.0) * sa.stddev * sa.stddev + (nb - 1.0) * sb.stddev * sb.stddev) / (na + nb - 2.0);
  DirectionalCheck c;
  c.metric = metric;
  c.leader = leader.strategy;
  c.rival = rival.strategy;
  c.margin = sa.mean - sb.mean;
  c.pooled_se = std::sqrt(pooled_var * (1.0 / na + 1.0 / nb));
  return c;
}

std::string format_percent(double fraction) {
  // The epsilon absorbs binary representation error at exact halves.
  const double cents = std::floor(fraction * 10000.0 + 0.5 + 1e-7);
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", cents / 100.0);
  return buf;
}

std::string format_summary(const Summary& s) { return format_percent(s.mean) + " ± " + format_percent(s.stddev); }

namespace {

// Display width, counting the two-byte "±" as one column.
std::size_t display_width(const std::string& s) {
  std::size_t n = 0;
  for (unsigned char c : s) n += (c & 0xC0) != 0x80;
  return n;
}

std::string render_grid(const std::string& title, const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> widths;
  for (const auto& row : rows) {
    widths.resize(std::max(widths.size(), row.size()), 0);
    for (std::size_t c = 0; c < row.size(); ++c) widths[c] = std::max(widths[c], display_width(row[c]));
  }
  std::ostringstream os;
  os << title << "\n";
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      const std::string& cell = rows[r][c];
      const std::string pad(widths[c] - display_width(cell), ' ');
      if (c == 0) {
        os << cell << pad;
      } else {
        os << "  " << pad << cell;
      }
    }
    os << "\n";
    if (r == 0) {
      std::size_t total = 0;
      for (std::size_t w : widths) total += w + 2;
      os << std::string(total - 2, '-') << "\n";
    }
  }
  return os.str();
}

std::string cell(const EvalReport& r, const std::string& key) {
  auto it = r.summaries.find(key);
  return it == r.summaries.end() ? "-" : format_summary(it->second);
}

// Metric keys under prefix, in record order, excluding the named extras.
std::vector<std::string> keys_with_prefix(const EvalReport& r, const std::string& prefix) {
  std::vector<std::string> out;
  for (const auto& [key, s] : r.summaries) {
    if (key.rfind(prefix, 0) == 0) out.push_back(key);
  }
  return out;
}

}  // namespace

std::string render_tables(const std::vector<EvalReport>& reports) {
  std::ostringstream os;
  std::vector<std::vector<std::string>> rows{{"Method", "Base", "New", "HM", "Open-world"}};
  for (const auto& r : reports) {
    rows.push_back({r.strategy, cell(r, "open_world.base_acc"), cell(r, "open_world.new_acc"), cell(r, "open_world.hm"),
                    cell(r, "open_world.accuracy")});
  }
  os << render_grid("Open-world generalization (%, mean ± std over seeds)", rows);

  if (!reports.empty()) {
    const auto targets = keys_with_prefix(reports.front(), "cross_dataset.target_");
    if (!targets.empty()) {
      std::vector<std::string> header{"Method", "Source"};
      for (std::size_t i = 0; i < targets.size(); ++i) header.push_back("Target " + std::to_string(i + 1));
      header.push_back("Average");
      std::vector<std::vector<std::string>> grid{header};
      for (const auto& r : reports) {
        std::vector<std::string> row{r.strategy, cell(r, "cross_dataset.source")};
        for (const auto& t : targets) row.push_back(cell(r, t));
        row.push_back(cell(r, "cross_dataset.average"));
        grid.push_back(row);
      }
      os << "\n" << render_grid("Cross-dataset transfer (%)", grid);
    }
    const auto shifts = keys_with_prefix(reports.front(), "domain.shift.");
    if (!shifts.empty()) {
      std::vector<std::string> header{"Method", "Source"};
      for (const auto& s : shifts) header.push_back(s.substr(std::string("domain.shift.").size()));
      header.push_back("OOD Average");
      std::vector<std::vector<std::string>> grid{header};
      for (const auto& r : reports) {
        std::vector<std::string> row{r.strategy, cell(r, "domain.source")};
        for (const auto& s : shifts) row.push_back(cell(r, s));
        row.push_back(cell(r, "domain.ood_average"));
        grid.push_back(row);
      }
      os << "\n" << render_grid("Domain generalization (%)", grid);
    }
  }
  for (const auto& r : reports) {
    for (const auto& f : r.flags) os << "\nFLAG [" << r.strategy << "] " << f;
  }
  if (std::any_of(reports.begin(), reports.end(), [](const EvalReport& r) { return !r.flags.empty(); })) os << "\n";
  return os.str();
}

}  // namespace bmip
