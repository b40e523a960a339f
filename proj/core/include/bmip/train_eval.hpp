#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "bmip/aggregation.hpp"
#include "bmip/backbone.hpp"
#include "bmip/optim.hpp"
#include "bmip/synth_data.hpp"

namespace bmip {

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 16;
  double learning_rate = 0.1;
  double momentum = 0.9;
  Schedule schedule = Schedule::Cosine;
  std::uint64_t seed = 0;
  Strategy strategy = Strategy::Bmip;
  std::size_t depth = 3;   // J
  std::size_t length = 2;  // b
  InteractionConfig interaction;

  /// Throws ConfigError with the offending field named.
  void validate() const;
  std::string canonical() const;
};

struct TrainLog {
  double initial_loss = 0;
  double final_loss = 0;
  std::vector<double> epoch_losses;  // mean minibatch loss per epoch
  std::size_t steps = 0;
};

/// A label space: global class ids and the caption of each, index-aligned.
/// Logit n belongs to classes[n].
struct LabelSpace {
  std::vector<int> classes;
  std::vector<Caption> captions;

  static LabelSpace of(const SyntheticDataset& dataset, const std::vector<int>& classes);
  static LabelSpace all(const SyntheticDataset& dataset);
  std::size_t index_of(int label) const;  // throws std::invalid_argument if absent
};

/// Mean cross-entropy over the label space on every example, one full pass
/// without gradients.
double training_loss(const Backbone& backbone, const PromptModel& model, const std::vector<LabeledExample>& examples,
                     const LabelSpace& space);

/// Prompt tuning with the backbone frozen: only model.parameters() move.
/// Throws std::runtime_error naming the step if the loss goes non-finite.
PromptModel tune_prompts(const Backbone& backbone, PromptModel model, const std::vector<LabeledExample>& train,
                         const LabelSpace& space, const TrainConfig& config, TrainLog* log = nullptr);

// Metrics --------------------------------------------------------------------------

/// Index of the largest value; ties go to the lowest index.
std::size_t argmax(std::span<const double> values);

/// Predicted global class id per image, over the label space.
std::vector<int> predict(const Backbone& backbone, const PromptModel& model, std::span<const Image> images,
                         const LabelSpace& space);

/// 2 b n / (b + n), and 0 when either side is 0.
double harmonic_mean(double base_acc, double new_acc);

/// Fraction of equal entries. Throws std::invalid_argument when empty.
double accuracy(std::span<const int> predicted, std::span<const int> labels);

/// Top-1 accuracy over the label space. Every label must be inside it.
double eval_closed(const Backbone& backbone, const PromptModel& model, const std::vector<LabeledExample>& examples,
                   const LabelSpace& space);

struct OpenWorldResult {
  double base_acc = 0;
  double new_acc = 0;
  double hm = 0;
  double open_world_acc = 0;
  std::map<int, double> per_class;  // accuracy of each class under the union space
  std::size_t base_count = 0;
  std::size_t new_count = 0;
};

/// Scores predictions already made over the union label space.
OpenWorldResult score_open_world(std::span<const int> base_predicted, std::span<const int> base_labels,
                                 std::span<const int> new_predicted, std::span<const int> new_labels);

/// Classifies base and new test examples over base u new; base/new identity
/// is unknown to the classifier. Throws std::invalid_argument if the class
/// sets overlap.
OpenWorldResult eval_open_world(const Backbone& backbone, const PromptModel& model, const SyntheticDataset& dataset,
                                const BaseNewSplit& split);

/// Accuracy on each target's test set over that target's full label space,
/// with no further tuning.
std::vector<double> eval_cross_dataset(const Backbone& backbone, const PromptModel& model,
                                       const std::vector<SyntheticDataset>& targets);

struct ShiftSpec {
  ShiftKind kind = ShiftKind::Brightness;
  double magnitude = 0;
  std::string name() const;  // e.g. "noise@0.3"
};

struct DomainResult {
  double source_acc = 0;
  std::vector<double> variant_acc;  // one per shift, in order
  double ood_average = 0;
};

DomainResult eval_domain_generalization(const Backbone& backbone, const PromptModel& model,
                                        const SyntheticDataset& source, const std::vector<ShiftSpec>& shifts);

// Corollary 1 ------------------------------------------------------------------------

struct CorollaryResult {
  double loss_independent = 0;          // arm A after training
  double loss_bmip_initial = 0;         // arm B before continuing
  double loss_bmip_from_saturated_init = 0;  // arm B after continuing
  TrainLog independent_log;
  TrainLog bmip_log;
};

/// Arm B's schedule: same batches and seed, a tenth of the learning rate and
/// 5 epochs, so it refines arm A's optimum rather than leaving it.
TrainConfig continuation_config(const TrainConfig& config);

/// Arm A tunes Independent prompts. Arm B copies them into a BMIP model with
/// gates pinned near w = 1 and keeps training under `continuation`.
CorollaryResult corollary1_experiment(const Backbone& backbone, const std::vector<LabeledExample>& train,
                                      const LabelSpace& space, const TrainConfig& config,
                                      const TrainConfig& continuation);

// Reports ------------------------------------------------------------------------------

/// One seed's outcome: flat metric keys to raw values (fractions, losses).
struct SeedRecord {
  std::uint64_t seed = 0;
  std::string strategy;
  std::string config_digest;
  std::string backbone_digest;
  std::string prompt_digest;
  std::map<std::string, double> metrics;

  /// Canonical structured text (JSON with sorted keys, full precision).
  std::string to_text() const;
  static SeedRecord from_text(const std::string& text);
};

struct Summary {
  double mean = 0;
  double stddev = 0;  // sample standard deviation; 0 for a single seed
  std::size_t count = 0;
};

Summary summarize(std::span<const double> values);

/// Means and deviations over seeds for every metric key that all records share.
struct EvalReport {
  std::string strategy;
  std::string config_digest;
  std::vector<std::uint64_t> seeds;
  std::map<std::string, std::vector<double>> series;
  std::map<std::string, Summary> summaries;
  std::vector<std::string> flags;  // e.g. unmet directional checks

  /// Throws std::invalid_argument for no records or mixed strategy/config digests.
  static EvalReport from_records(const std::vector<SeedRecord>& records);
  std::string to_text() const;
  static EvalReport from_text(const std::string& text);
};

/// Whether `leader` beats `rival` on a metric's seed mean by more than one
/// pooled standard error, sp * sqrt(1/n1 + 1/n2) with sp^2 the pooled sample
/// variance.
struct DirectionalCheck {
  std::string metric;
  std::string leader;
  std::string rival;
  double margin = 0;     // leader mean - rival mean
  double pooled_se = 0;
  bool met() const { return margin > pooled_se; }
  /// One line, e.g. "open_world.hm: bmip - independent = +0.0312 vs pooled SE 0.0530 (not met)".
  std::string describe() const;
};

/// Throws std::invalid_argument if either report lacks the metric or has
/// fewer than two seeds.
DirectionalCheck directional_check(const EvalReport& leader, const EvalReport& rival, const std::string& metric);

/// "xx.xx" from a fraction, rounding half up at the second decimal.
std::string format_percent(double fraction);
/// "mean ± std" in percent.
std::string format_summary(const Summary& s);

/// Aligned tables: open-world (base/new/HM/open-world), then cross-dataset and
/// domain rows when present.
std::string render_tables(const std::vector<EvalReport>& reports);

}  // namespace bmip
