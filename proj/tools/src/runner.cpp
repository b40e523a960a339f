#include "bmip/cli/runner.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

#include "json.hpp"

#include "bmip/checkpoint.hpp"
#include "bmip/digest.hpp"
#include "bmip/random.hpp"

#ifndef BMIP_VERSION
#define BMIP_VERSION "unknown"
#endif

namespace bmip::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ArtifactError("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::string seed_file_name(std::uint64_t seed, const char* extension) {
  return "seed-" + std::to_string(seed) + extension;
}

// Tuning seed of the all-class model used by the transfer protocols; kept
// apart from the base-class model's stream.
constexpr std::uint64_t kSourceModelStream = 0x50;

std::string padded(std::size_t value, int width) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%0*zu", width, value);
  return buf;
}

void log_line(const RunOptions& options, const std::string& line) {
  static std::mutex mu;
  if (!options.log) return;
  std::lock_guard<std::mutex> lock(mu);
  *options.log << line << std::endl;
}

std::vector<SeedRecord> read_records(const fs::path& run_dir) {
  std::vector<SeedRecord> records;
  const fs::path dir = run_dir / "seeds";
  if (!fs::is_directory(dir)) return records;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("seed-", 0) != 0 || entry.path().extension() != ".json") continue;
    try {
      records.push_back(SeedRecord::from_text(read_file(entry.path())));
    } catch (const nlohmann::json::exception& e) {
      throw ArtifactError("malformed seed record " + entry.path().string() + ": " + e.what());
    }
  }
  std::sort(records.begin(), records.end(), [](const SeedRecord& a, const SeedRecord& b) { return a.seed < b.seed; });
  return records;
}

json read_manifest(const fs::path& path) {
  try {
    return json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ArtifactError("malformed manifest " + path.string() + ": " + e.what());
  }
}

}  // namespace

fs::path output_root() {
  const char* env = std::getenv(kOutputRootVariable);
  return env && *env ? fs::path(env) : fs::path("bmip-runs");
}

fs::path RunPaths::seed_record(std::uint64_t seed) const { return run_dir / "seeds" / seed_file_name(seed, ".json"); }
fs::path RunPaths::prompt_checkpoint(std::uint64_t seed) const {
  return run_dir / "prompts" / seed_file_name(seed, ".ckpt");
}
fs::path RunPaths::dataset_export(std::uint64_t seed) const { return run_dir / "data" / seed_file_name(seed, ".tsv"); }

RunPaths run_paths(const fs::path& root, const ExperimentConfig& config) {
  return {root, root / (std::string(strategy_name(config.train.strategy)) + "-" + config.digest()),
          root / "backbones"};
}

void write_atomic(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = temporary_sibling(path);
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw ArtifactError("cannot write " + tmp.string());
    os << text;
    if (!os.flush()) throw ArtifactError("failed writing " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::uint64_t backbone_key(const ExperimentConfig& config, std::uint64_t seed) {
  SyntheticSpec spec = config.data;
  spec.seed = seed;
  return Fnv1a()
      .text(spec.canonical())
      .text(config.backbone.canonical())
      .text(config.pretrain.canonical())
      .u64(config.pairs_per_class)
      .value();
}

Backbone obtain_backbone(const ExperimentConfig& config, const SyntheticDataset& dataset, std::uint64_t seed,
                         const fs::path& cache_dir, bool* was_cached) {
  const std::uint64_t key = backbone_key(config, seed);
  const fs::path path = cache_dir / (digest_hex(key) + ".ckpt");
  if (fs::exists(path)) {
    if (was_cached) *was_cached = true;
    return restore_backbone(read_checkpoint(path, key), config.backbone);
  }
  if (was_cached) *was_cached = false;
  PretrainConfig pretrain = config.pretrain;
  pretrain.seed = seed;
  const PairedCorpus corpus = pretraining_corpus(dataset, config.pairs_per_class);
  Backbone backbone = pretrain_contrastive(config.backbone, corpus.images, corpus.captions, pretrain);
  fs::create_directories(cache_dir);
  write_checkpoint(path, make_checkpoint(key, backbone));
  return backbone;
}

SeedRecord run_seed(const ExperimentConfig& config, std::uint64_t seed, const RunPaths& paths,
                    const RunOptions& options) {
  const auto t0 = std::chrono::steady_clock::now();
  SyntheticSpec spec = config.data;
  spec.seed = seed;
  const SyntheticDataset dataset = generate(spec);
  if (options.export_data) {
    fs::create_directories(paths.dataset_export(seed).parent_path());
    export_records(dataset, paths.dataset_export(seed));
  }

  bool cached = false;
  const Backbone backbone = obtain_backbone(config, dataset, seed, paths.backbones, &cached);
  const std::uint64_t frozen = backbone.params.digest();

  TrainConfig train = config.train;
  train.seed = seed;
  SeedRecord record;
  record.seed = seed;
  record.strategy = std::string(strategy_name(train.strategy));
  record.config_digest = config.digest();
  record.backbone_digest = digest_hex(frozen);
  Checkpoint prompts{config.digest_value(), {}};

  if (config.eval.wants(Protocol::OpenWorld)) {
    const BaseNewSplit split = split_base_new(dataset, config.eval.base_fraction);
    const auto examples = select_classes(dataset.train, split.base);
    const LabelSpace space = LabelSpace::of(dataset, split.base);
    PromptModel model =
        PromptModel::initialize(config.backbone, train.strategy, train.depth, train.length, train.interaction, seed);
    TrainLog log;
    model = tune_prompts(backbone, std::move(model), examples, space, train, &log);
    const OpenWorldResult ow = eval_open_world(backbone, model, dataset, split);
    record.metrics["open_world.base_acc"] = ow.base_acc;
    record.metrics["open_world.new_acc"] = ow.new_acc;
    record.metrics["open_world.hm"] = ow.hm;
    record.metrics["open_world.accuracy"] = ow.open_world_acc;
    for (const auto& [c, acc] : ow.per_class) {
      record.metrics["open_world.class." + padded(static_cast<std::size_t>(c), 3)] = acc;
    }
    record.metrics["train.initial_loss"] = log.initial_loss;
    record.metrics["train.final_loss"] = log.final_loss;
    record.prompt_digest = digest_hex(model.digest());
    prompts.blobs = model.named_parameters();
  }

  const bool transfer = config.eval.wants(Protocol::CrossDataset) || config.eval.wants(Protocol::Domain);
  if (transfer) {
    // Transfer protocols start from prompts tuned on every source class.
    const LabelSpace space = LabelSpace::all(dataset);
    TrainConfig source_train = train;
    source_train.seed = derive_seed(seed, kSourceModelStream);
    PromptModel model = PromptModel::initialize(config.backbone, train.strategy, train.depth, train.length,
                                                train.interaction, source_train.seed);
    TrainLog log;
    model = tune_prompts(backbone, std::move(model), dataset.train, space, source_train, &log);
    record.metrics["source.train.final_loss"] = log.final_loss;
    if (config.eval.wants(Protocol::CrossDataset)) {
      std::vector<SyntheticDataset> targets;
      for (std::size_t i = 0; i < config.eval.transfer_targets; ++i) {
        targets.push_back(make_transfer_target(dataset, i, config.eval.transfer_visual_variance));
      }
      const auto accs = eval_cross_dataset(backbone, model, targets);
      record.metrics["cross_dataset.source"] = eval_closed(backbone, model, dataset.test, space);
      double total = 0.0;
      for (std::size_t i = 0; i < accs.size(); ++i) {
        record.metrics["cross_dataset.target_" + padded(i + 1, 2)] = accs[i];
        total += accs[i];
      }
      record.metrics["cross_dataset.average"] = total / static_cast<double>(accs.size());
    }
    if (config.eval.wants(Protocol::Domain)) {
      const DomainResult d = eval_domain_generalization(backbone, model, dataset, config.eval.shifts);
      record.metrics["domain.source"] = d.source_acc;
      for (std::size_t i = 0; i < d.variant_acc.size(); ++i) {
        record.metrics["domain.shift." + config.eval.shifts[i].name()] = d.variant_acc[i];
      }
      record.metrics["domain.ood_average"] = d.ood_average;
    }
    for (auto& [name, t] : model.named_parameters()) {
      prompts.blobs.emplace_back("tunable/source/" + name.substr(std::string("tunable/").size()), t);
    }
  }

  if (backbone.params.digest() != frozen) {
    throw std::logic_error("seed " + std::to_string(seed) + ": backbone digest changed during prompt tuning");
  }
  fs::create_directories(paths.prompt_checkpoint(seed).parent_path());
  write_checkpoint(paths.prompt_checkpoint(seed), prompts);

  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  char buf[160];
  std::snprintf(buf, sizeof buf, "[%s] seed %llu done in %.1fs (backbone %s)", record.strategy.c_str(),
                static_cast<unsigned long long>(seed), secs, cached ? "cached" : "pretrained");
  log_line(options, buf);
  return record;
}

RunResult run_experiment(const ExperimentConfig& config, const fs::path& root, const RunOptions& options) {
  config.validate();
  const auto t0 = std::chrono::steady_clock::now();
  RunResult result;
  result.paths = run_paths(root, config);
  const RunPaths& paths = result.paths;
  fs::create_directories(paths.run_dir);

  json manifest = {{"config_digest", config.digest()},
                   {"strategy", std::string(strategy_name(config.train.strategy))},
                   {"version", BMIP_VERSION},
                   {"completed_seeds", json::array()},
                   {"failed_seeds", json::object()},
                   {"backbone_digests", json::object()}};
  if (fs::exists(paths.manifest())) {
    const json previous = read_manifest(paths.manifest());
    if (previous.value("config_digest", "") != config.digest()) {
      throw ArtifactError(paths.manifest().string() + " belongs to config digest " +
                          previous.value("config_digest", "?") + ", not " + config.digest());
    }
    manifest["completed_seeds"] = previous.value("completed_seeds", json::array());
    manifest["backbone_digests"] = previous.value("backbone_digests", json::object());
  }
  manifest["requested_seeds"] = config.seeds;
  manifest["partial"] = true;
  write_atomic(paths.config(), to_ini(config));
  write_atomic(paths.manifest(), manifest.dump(2) + "\n");

  std::mutex mu;
  std::map<std::uint64_t, std::string> failures;
  std::map<std::uint64_t, std::string> backbone_digests;
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < config.seeds.size(); i = next++) {
      const std::uint64_t seed = config.seeds[i];
      try {
        const SeedRecord record = run_seed(config, seed, paths, options);
        write_atomic(paths.seed_record(seed), record.to_text());
        std::lock_guard<std::mutex> lock(mu);
        backbone_digests[seed] = record.backbone_digest;
      } catch (const std::exception& e) {
        log_line(options, "[" + std::string(strategy_name(config.train.strategy)) + "] seed " + std::to_string(seed) +
                              " failed: " + e.what());
        std::lock_guard<std::mutex> lock(mu);
        failures[seed] = e.what();
      }
    }
  };
  const std::size_t workers = std::min(config.workers, config.seeds.size());
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  std::vector<std::uint64_t> completed = manifest["completed_seeds"].get<std::vector<std::uint64_t>>();
  for (const auto& [seed, digest] : backbone_digests) {
    completed.push_back(seed);
    manifest["backbone_digests"][std::to_string(seed)] = digest;
  }
  std::sort(completed.begin(), completed.end());
  completed.erase(std::unique(completed.begin(), completed.end()), completed.end());
  for (const auto& [seed, what] : failures) {
    manifest["failed_seeds"][std::to_string(seed)] = what;
    completed.erase(std::remove(completed.begin(), completed.end(), seed), completed.end());
    result.failed.push_back(seed);
  }
  manifest["completed_seeds"] = completed;
  manifest["partial"] = !failures.empty();
  manifest["wall_time_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_atomic(paths.manifest(), manifest.dump(2) + "\n");

  result.report = load_report(paths.run_dir);
  write_atomic(paths.report_json(), result.report.to_text());
  write_atomic(paths.report_table(), render_tables({result.report}));
  return result;
}

std::string describe_plan(const ExperimentConfig& config, const fs::path& root) {
  config.validate();
  const RunPaths paths = run_paths(root, config);
  std::ostringstream os;
  os << "config digest   " << config.digest() << "\n"
     << "run directory   " << paths.run_dir.string() << "\n"
     << "aggregation     " << strategy_name(config.train.strategy) << " (J=" << config.train.depth
     << ", b=" << config.train.length << ")\n"
     << "protocols      ";
  for (Protocol p : config.eval.protocols) os << " " << protocol_name(p);
  os << "\nworkers         " << config.workers << "\n";
  for (std::uint64_t seed : config.seeds) {
    const fs::path bb = paths.backbones / (digest_hex(backbone_key(config, seed)) + ".ckpt");
    os << "seed " << seed << ": backbone "
       << (fs::exists(bb) ? "cached at " + bb.string()
                          : "pretrained for " + std::to_string(config.pretrain.steps) + " steps into " + bb.string())
       << "; tune " << config.train.epochs << " epochs; record " << paths.seed_record(seed).string() << "\n";
  }
  os << "\nresolved config:\n" << to_ini(config);
  return os.str();
}

EvalReport load_report(const fs::path& run_dir) {
  const fs::path manifest_path = run_dir / "manifest.json";
  if (!fs::exists(manifest_path)) throw ArtifactError("no manifest in " + run_dir.string());
  const json manifest = read_manifest(manifest_path);
  const std::string digest = manifest.value("config_digest", "");
  const fs::path config_path = run_dir / "config.ini";
  if (fs::exists(config_path)) {
    std::string actual;
    try {
      actual = load_config(config_path).digest();
    } catch (const ConfigError& e) {
      throw ArtifactError("refusing to report: " + config_path.string() + " no longer parses: " + e.what());
    }
    if (actual != digest) {
      throw ArtifactError("refusing to report: " + config_path.string() + " resolves to digest " + actual +
                          " but the manifest records " + digest + "; the config was edited after the run");
    }
  }
  const auto records = read_records(run_dir);
  if (records.empty()) throw ArtifactError("refusing to report: no seed records in " + run_dir.string());
  for (const auto& r : records) {
    if (r.config_digest != digest) {
      throw ArtifactError("refusing to report: seed " + std::to_string(r.seed) + " was produced under config digest " +
                          r.config_digest + " but the manifest records " + digest +
                          "; records from different configs cannot be pooled");
    }
  }
  EvalReport report = EvalReport::from_records(records);
  if (manifest.value("partial", false)) {
    std::string failed;
    for (const auto& [seed, what] : manifest.value("failed_seeds", json::object()).items()) {
      failed += (failed.empty() ? "" : ", ") + seed;
    }
    report.flags.push_back("partial run: seeds " + failed + " failed; see manifest.json");
  }
  return report;
}

std::vector<DirectionalCheck> ablation_checks(const std::vector<EvalReport>& reports) {
  std::vector<DirectionalCheck> out;
  auto find = [&](Strategy s) -> const EvalReport* {
    for (const auto& r : reports) {
      if (r.strategy == strategy_name(s)) return &r;
    }
    return nullptr;
  };
  const EvalReport* bmip = find(Strategy::Bmip);
  if (!bmip) return out;
  for (Strategy rival : {Strategy::Independent, Strategy::UniDirectional}) {
    const EvalReport* r = find(rival);
    if (!r || bmip->seeds.size() < 2 || r->seeds.size() < 2) continue;
    if (!bmip->series.count("open_world.hm") || !r->series.count("open_world.hm")) continue;
    out.push_back(directional_check(*bmip, *r, "open_world.hm"));
  }
  return out;
}

SweepResult run_sweep(const ExperimentConfig& config, const std::vector<Strategy>& strategies, const fs::path& root,
                      const RunOptions& options) {
  SweepResult result;
  std::string sweep_key;
  {
    std::istringstream is(config.canonical());
    for (std::string line; std::getline(is, line);) {
      if (line.rfind("train.aggregation=", 0) != 0) sweep_key += line + "\n";
    }
  }
  result.dir = root / ("sweep-" + digest_hex(Fnv1a().text(sweep_key).value()));
  for (Strategy s : strategies) {
    ExperimentConfig c = config;
    c.train.strategy = s;
    result.reports.push_back(run_experiment(c, root, options).report);
  }
  result.checks = ablation_checks(result.reports);
  for (const auto& check : result.checks) {
    if (check.met()) continue;
    for (auto& r : result.reports) {
      if (r.strategy == check.leader) r.flags.push_back("directional check unmet: " + check.describe());
    }
  }
  std::ostringstream table;
  table << render_tables(result.reports);
  if (!result.checks.empty()) {
    table << "\nDirectional checks (open-world HM, margin must exceed one pooled standard error)\n";
    for (const auto& c : result.checks) table << "  " << c.describe() << "\n";
  }
  result.table = table.str();

  json summary = json::object();
  summary["strategies"] = json::array();
  for (const auto& r : result.reports) summary["strategies"].push_back(json::parse(r.to_text()));
  summary["checks"] = json::array();
  for (const auto& c : result.checks) {
    summary["checks"].push_back({{"metric", c.metric},
                                 {"leader", c.leader},
                                 {"rival", c.rival},
                                 {"margin", c.margin},
                                 {"pooled_se", c.pooled_se},
                                 {"met", c.met()}});
  }
  write_atomic(result.dir / "sweep.json", summary.dump(2) + "\n");
  write_atomic(result.dir / "table.txt", result.table);
  return result;
}

}  // namespace bmip::cli
