#include <cstdlib>
#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "safs/experiment.hpp"

using namespace safs::experiment;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::string out;
  std::string data_dir;
  std::int64_t seed = -1;
  bool force = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config, "JSON config file");
  cmd->add_option("--set", c.overrides, "Override a config key, e.g. --set stage1.budget=30")->take_all();
  cmd->add_option("-o,--out", c.out, "Run directory (overrides output_dir)");
  cmd->add_option("--seed", c.seed, "Root seed (overrides seed)");
  cmd->add_option("--data-dir", c.data_dir, "MNIST IDX directory (overrides data.dir)");
  cmd->add_flag("--force", c.force, "Rerun the command's own stage even if it is up to date");
}

ExperimentConfig effective_config(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : load_config(c.config);
  std::vector<std::string> sets = c.overrides;
  if (!c.out.empty()) sets.push_back("output_dir=\"" + c.out + "\"");
  if (c.seed >= 0) sets.push_back("seed=" + std::to_string(c.seed));
  if (!c.data_dir.empty()) sets.push_back("data.dir=\"" + c.data_dir + "\"");
  return apply_overrides(cfg, sets);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse-network activation search: pretrain, prune, search operators, tune and report"};
  app.require_subcommand(1);
  Common common;
  std::string report_dir;

  struct Command {
    const char* name;
    const char* help;
    const char* stage;
    void (Runner::*run)();
  };
  const std::vector<Command> commands = {
      {"pretrain", "Train the dense network", "pretrain", &Runner::pretrain},
      {"prune", "Magnitude-prune the dense network", "prune", &Runner::prune},
      {"stage1", "Search per-layer activation operators", "stage1", &Runner::stage1},
      {"stage2", "Tune scales and fine-tuning hyperparameters", "stage2", &Runner::stage2},
      {"pipeline", "Run every stage and write the report", "stage2", &Runner::pipeline},
      {"ablate", "Run the vanilla / stage1-only / stage2-only / combined matrix", "ablation", &Runner::ablate},
      {"compare-search", "Compare search algorithms across seeds", "compare", &Runner::compare_search},
  };
  std::vector<std::pair<CLI::App*, const Command*>> subs;
  for (const auto& c : commands) {
    auto* sub = app.add_subcommand(c.name, c.help);
    add_common(sub, common);
    subs.push_back({sub, &c});
  }
  auto* report = app.add_subcommand("report", "Write summary JSON and plottable CSVs for a run directory");
  report->add_option("dir", report_dir, "Run directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (report->parsed()) {
      Runner::write_report(report_dir);
      std::cout << (std::filesystem::path(report_dir) / "report/summary.json").string() << '\n';
      return EXIT_SUCCESS;
    }
    for (const auto& [sub, cmd] : subs) {
      if (!sub->parsed()) continue;
      Runner runner(effective_config(common));
      if (common.force) runner.force({cmd->stage});
      (runner.*(cmd->run))();
      std::cout << (runner.dir() / kManifestFile).string() << '\n';
    }
  } catch (const std::exception& e) {
    std::cerr << "safs: " << e.what() << '\n';
    return EXIT_FAILURE;
  }
  return EXIT_SUCCESS;
}
