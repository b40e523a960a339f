#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "bmip/backbone.hpp"
#include "bmip/synth_data.hpp"
#include "bmip/train_eval.hpp"

namespace bmip::cli {

enum class Protocol { OpenWorld, CrossDataset, Domain };

std::string_view protocol_name(Protocol p);  // open_world | cross_dataset | domain

struct EvalConfig {
  std::vector<Protocol> protocols = {Protocol::OpenWorld, Protocol::CrossDataset, Protocol::Domain};
  double base_fraction = 0.5;
  std::size_t transfer_targets = 3;
  double transfer_visual_variance = 0.3;
  std::vector<ShiftSpec> shifts = {{ShiftKind::Brightness, 0.15},
                                   {ShiftKind::Noise, 0.15},
                                   {ShiftKind::StylePermutation, 0.5}};

  bool wants(Protocol p) const;
};

/// Everything a run needs. Seeds and worker count choose which replicates run
/// and how; they are excluded from the digest so every seed of one setting
/// lands in the same run directory.
struct ExperimentConfig {
  SyntheticSpec data;
  BackboneConfig backbone;
  PretrainConfig pretrain;
  std::size_t pairs_per_class = 64;
  TrainConfig train;
  EvalConfig eval;
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  std::size_t workers = 1;

  /// Throws ConfigError naming the offending field.
  void validate() const;
  /// Sorted "section.key=value" lines of every digested field.
  std::string canonical() const;
  /// 16 hex digits of FNV-1a over canonical().
  std::string digest() const;
  std::uint64_t digest_value() const;
};

/// Parses a flat INI document ([section] headers, key = value, ';' comments).
/// Missing keys keep their defaults; unknown sections or keys and malformed
/// values throw ConfigError naming "section.key".
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Renders every field, digested or not, as a loadable INI document.
std::string to_ini(const ExperimentConfig& config);

/// "1,2,3" or "1-5" (or a mix, "1-3,7"). Throws ConfigError when empty or malformed.
std::vector<std::uint64_t> parse_seed_list(const std::string& text);
/// Comma-separated strategy names. Throws ConfigError on unknown names.
std::vector<Strategy> parse_strategy_list(const std::string& text);

}  // namespace bmip::cli
