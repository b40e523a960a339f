// bmip: run, report, sweep, gradcheck, oracle.
#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "bmip/cli/config.hpp"
#include "bmip/cli/runner.hpp"
#include "bmip/runtime.hpp"
#include "bmip/verify/gradcheck.hpp"
#include "bmip/verify/oracle.hpp"

namespace {

using namespace bmip;
using namespace bmip::cli;

constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;

struct CommonArgs {
  std::string config_path;
  std::string strategy;
  std::string seeds;
  int workers = 0;
};

ExperimentConfig resolve(const CommonArgs& args) {
  ExperimentConfig config = args.config_path.empty() ? ExperimentConfig{} : load_config(args.config_path);
  if (!args.strategy.empty()) config.train.strategy = parse_strategy(args.strategy);
  if (!args.seeds.empty()) config.seeds = parse_seed_list(args.seeds);
  if (args.workers > 0) config.workers = static_cast<std::size_t>(args.workers);
  config.validate();
  return config;
}

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("-c,--config", args.config_path, "INI experiment config")->check(CLI::ExistingFile);
  cmd->add_option("--seeds", args.seeds, "seed list, e.g. 1-5 or 1,3,7 (overrides [run] seeds)");
  cmd->add_option("-j,--workers", args.workers, "parallel seeds (overrides [run] workers)");
}

int report_seeds_failed(const std::vector<std::uint64_t>& failed) {
  if (failed.empty()) return 0;
  std::cerr << "bmip: " << failed.size() << " seed(s) failed; run flagged partial\n";
  return kExitFailure;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Prompt tuning experiments on a frozen synthetic two-tower backbone"};
  app.require_subcommand(1);

  CommonArgs run_args;
  bool dry_run = false;
  bool export_data = false;
  auto* run = app.add_subcommand("run", "generate, pretrain or load backbone, tune prompts, evaluate");
  add_common(run, run_args);
  run->add_option("-s,--strategy", run_args.strategy,
                  "aggregation: bmip|addition|attention_sim|joint|unidirectional|independent");
  run->add_flag("--dry-run", dry_run, "print the resolved plan and exit");
  run->add_flag("--export-data", export_data, "write each seed's dataset as line records");

  std::string report_dir;
  bool report_json = false;
  auto* report = app.add_subcommand("report", "re-render tables from a run directory's records");
  report->add_option("run_dir", report_dir, "run directory")->required()->check(CLI::ExistingDirectory);
  report->add_flag("--json", report_json, "print the canonical JSON report instead of tables");

  CommonArgs sweep_args;
  std::string sweep_strategies;
  auto* sweep = app.add_subcommand("sweep", "run several strategies and print the ablation table");
  add_common(sweep, sweep_args);
  sweep->add_option("--strategies", sweep_strategies, "comma-separated strategies (default: all six)");

  std::string check_seeds = "1,2,3";
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op");
  gradcheck->add_option("--seeds", check_seeds, "seed list");
  auto* oracle = app.add_subcommand("oracle", "compare the batched forward against the naive reference");
  oracle->add_option("--seeds", check_seeds, "seed list");

  CLI11_PARSE(app, argc, argv);

  try {
    RunOptions options;
    options.log = &std::cerr;
    if (*run) {
      const ExperimentConfig config = resolve(run_args);
      if (dry_run) {
        std::cout << describe_plan(config, output_root());
        return 0;
      }
      options.export_data = export_data;
      const RunResult result = run_experiment(config, output_root(), options);
      std::cout << render_tables({result.report}) << "\nrun directory: " << result.paths.run_dir.string() << "\n";
      return report_seeds_failed(result.failed);
    }
    if (*report) {
      const EvalReport r = load_report(report_dir);
      std::cout << (report_json ? r.to_text() + "\n" : render_tables({r}));
      return 0;
    }
    if (*sweep) {
      const ExperimentConfig config = resolve(sweep_args);
      std::vector<Strategy> strategies(std::begin(kSweepOrder), std::end(kSweepOrder));
      if (!sweep_strategies.empty()) strategies = parse_strategy_list(sweep_strategies);
      const SweepResult result = run_sweep(config, strategies, output_root(), options);
      std::cout << result.table << "\nsweep directory: " << result.dir.string() << "\n";
      return 0;
    }
    const std::vector<std::uint64_t> seeds = parse_seed_list(check_seeds);
    bool ok = true;
    if (*gradcheck) {
      for (const auto& c : verify::run_gradcheck_suite(seeds)) {
        std::printf("%-4s %-40s seed %-3llu rel err %.3e (%zu coords)\n", c.passed() ? "ok" : "FAIL", c.name.c_str(),
                    static_cast<unsigned long long>(c.seed), c.max_relative_error, c.coordinates);
        ok = ok && c.passed();
      }
    } else {
      for (const auto& c : verify::run_oracle_suite(seeds)) {
        std::printf("%-4s %-16s J=%zu seed %-3llu max |diff| %.3e\n", c.passed() ? "ok" : "FAIL",
                    std::string(strategy_name(c.strategy)).c_str(), c.depth, static_cast<unsigned long long>(c.seed),
                    c.max_abs_diff);
        ok = ok && c.passed();
      }
    }
    return ok ? 0 : kExitFailure;
  } catch (const ConfigError& e) {
    std::cerr << "bmip: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "bmip: " << e.what() << "\n";
    return kExitFailure;
  }
}
