#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "bmip/cli/config.hpp"
#include "bmip/train_eval.hpp"

namespace bmip::cli {

/// Name of the environment variable that relocates every artifact.
inline constexpr const char* kOutputRootVariable = "BMIP_OUTPUT_ROOT";

/// $BMIP_OUTPUT_ROOT when set and non-empty, else "bmip-runs".
std::filesystem::path output_root();

/// Raised when on-disk artifacts are missing or inconsistent.
class ArtifactError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Layout under the output root:
///   backbones/<key>.ckpt                   frozen backbones, shared by strategies
///   <strategy>-<digest>/config.ini         resolved config
///   <strategy>-<digest>/manifest.json      digest, version, wall time, partial flag
///   <strategy>-<digest>/seeds/seed-N.json  per-seed metric records
///   <strategy>-<digest>/prompts/seed-N.ckpt
///   <strategy>-<digest>/report.json, report.txt
struct RunPaths {
  std::filesystem::path root;
  std::filesystem::path run_dir;
  std::filesystem::path backbones;

  std::filesystem::path seed_record(std::uint64_t seed) const;
  std::filesystem::path prompt_checkpoint(std::uint64_t seed) const;
  std::filesystem::path dataset_export(std::uint64_t seed) const;
  std::filesystem::path manifest() const { return run_dir / "manifest.json"; }
  std::filesystem::path config() const { return run_dir / "config.ini"; }
  std::filesystem::path report_json() const { return run_dir / "report.json"; }
  std::filesystem::path report_table() const { return run_dir / "report.txt"; }
};

RunPaths run_paths(const std::filesystem::path& root, const ExperimentConfig& config);

struct RunOptions {
  bool export_data = false;   // also write each seed's dataset as line records
  std::ostream* log = nullptr;  // progress lines; null for silence
};

/// Digest of everything that determines a seed's frozen backbone.
std::uint64_t backbone_key(const ExperimentConfig& config, std::uint64_t seed);

/// Loads the cached backbone for (config, seed) or pretrains and caches it.
Backbone obtain_backbone(const ExperimentConfig& config, const SyntheticDataset& dataset, std::uint64_t seed,
                         const std::filesystem::path& cache_dir, bool* was_cached = nullptr);

/// Generate -> backbone -> tune -> evaluate for one seed. Writes the prompt
/// checkpoint and returns the metric record (not yet written). Throws
/// std::logic_error if the backbone digest moves during tuning.
SeedRecord run_seed(const ExperimentConfig& config, std::uint64_t seed, const RunPaths& paths,
                    const RunOptions& options);

struct RunResult {
  RunPaths paths;
  EvalReport report;                  // over every record now in the run directory
  std::vector<std::uint64_t> failed;  // seeds of this invocation that threw
};

/// Runs every configured seed with up to config.workers threads, writing
/// records, manifest, and report atomically. A failed seed leaves the
/// manifest flagged partial and the others intact. Throws ArtifactError if
/// no record at all is available afterwards.
RunResult run_experiment(const ExperimentConfig& config, const std::filesystem::path& root,
                         const RunOptions& options);

/// What run_experiment would do, with the resolved config. Touches nothing.
std::string describe_plan(const ExperimentConfig& config, const std::filesystem::path& root);

/// Reads a run directory back. Refuses (ArtifactError) when the manifest,
/// config, and records disagree on the config digest, or no record exists.
EvalReport load_report(const std::filesystem::path& run_dir);

/// BMIP against Independent and UniDirectional on open-world HM, for
/// whichever of them are present with at least two seeds.
std::vector<DirectionalCheck> ablation_checks(const std::vector<EvalReport>& reports);

struct SweepResult {
  std::filesystem::path dir;
  std::vector<EvalReport> reports;
  std::vector<DirectionalCheck> checks;
  std::string table;
};

/// Ablation table row order: the baselines first, BMIP last.
inline constexpr Strategy kSweepOrder[] = {Strategy::Addition, Strategy::AttentionSim, Strategy::Joint,
                                           Strategy::Independent, Strategy::UniDirectional, Strategy::Bmip};

/// One run per strategy, then a consolidated table with directional checks.
/// Unmet checks become FLAG lines on the BMIP row rather than errors.
SweepResult run_sweep(const ExperimentConfig& config, const std::vector<Strategy>& strategies,
                      const std::filesystem::path& root, const RunOptions& options);

/// Writes text to path via a sibling temporary and rename.
void write_atomic(const std::filesystem::path& path, const std::string& text);

}  // namespace bmip::cli
