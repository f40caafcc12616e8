// Command-line front end: `simulate`, `csv` and `generate`.

#include <fstream>
#include <iostream>
#include <map>
#include <string>

#include "CLI11.hpp"
#include "csl/csl.hpp"

namespace {

// Flags shared by `simulate` and `csv`; each maps onto a config key.
const char* const kSettingFlags[] = {
    "scenario", "csv",        "response",    "log-response", "test-fraction", "n",          "replicates",
    "alpha",    "mode",       "split-fraction", "grid-step", "grid-margin",   "rank-rule",  "folds",
    "seed",     "threads",    "learners",    "rule",         "out",           "format",     "knn.k",
    "forest.trees", "forest.max-depth", "forest.min-leaf", "forest.mtry", "lasso.folds", "lasso.grid-size",
    "locscale.iterations",
};

struct Settings {
  std::string config_path;
  std::map<std::string, std::string> values;
  bool timing = false;
};

void add_setting_flags(CLI::App* cmd, Settings& s, bool simulate) {
  cmd->add_option("--config", s.config_path, "key = value config file; flags override its entries");
  for (const char* key : kSettingFlags) {
    const std::string k = key;
    if (simulate && (k == "csv" || k == "response" || k == "log-response" || k == "test-fraction")) continue;
    if (!simulate && (k == "scenario" || k == "n" || k == "replicates")) continue;
    cmd->add_option("--" + k, s.values[k]);
  }
  cmd->add_flag("--timing", s.timing, "print wall-clock runtime to stderr");
}

csl::ExperimentConfig resolve(CLI::App* cmd, const Settings& s) {
  csl::ExperimentConfig cfg;
  if (!s.config_path.empty()) {
    std::ifstream f(s.config_path);
    csl::require(static_cast<bool>(f), csl::Errc::invalid_config, "cannot open config file '" + s.config_path + "'");
    csl::parse_config(f, cfg, s.config_path);
  }
  for (const auto& [key, value] : s.values) {
    if (cmd->count("--" + key) > 0) csl::apply_setting(cfg, key, value);
  }
  return cfg;
}

void finish(const csl::ExperimentReport& report, const csl::ExperimentConfig& cfg, bool timing) {
  csl::emit_report(report, cfg.format, cfg.out, std::cout);
  if (timing) std::cerr << "runtime " << report.runtime_seconds << " s\n";
  for (const auto& sk : report.skipped) std::cerr << "skipped replicate " << sk.index << ": " << sk.error << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Ensemble conformal prediction sets"};
  app.require_subcommand(1);

  Settings sim_settings, csv_settings;
  auto* sim = app.add_subcommand("simulate", "Monte Carlo coverage study on a simulation scenario");
  add_setting_flags(sim, sim_settings, true);
  auto* csv = app.add_subcommand("csv", "Evaluate CSL prediction sets on a held-out share of a CSV table");
  add_setting_flags(csv, csv_settings, false);

  std::string gen_scenario = "S1", gen_out;
  long gen_n = 500;
  std::uint64_t gen_seed = 1, gen_replicate = 0;
  auto* gen = app.add_subcommand("generate", "Write one simulated data set as CSV");
  gen->add_option("--scenario", gen_scenario);
  gen->add_option("--n", gen_n);
  gen->add_option("--seed", gen_seed);
  gen->add_option("--replicate", gen_replicate);
  gen->add_option("--out", gen_out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*sim) {
      auto cfg = resolve(sim, sim_settings);
      if (!cfg.scenario) cfg.scenario = csl::Scenario::s1;
      const auto report = csl::run_simulation(cfg);
      finish(report, cfg, sim_settings.timing);
    } else if (*csv) {
      const auto cfg = resolve(csv, csv_settings);
      const auto report = csl::run_csv(cfg);
      finish(report, cfg, csv_settings.timing);
    } else if (*gen) {
      const auto sc = csl::parse_scenario(gen_scenario);
      csl::require(sc.has_value(), csl::Errc::invalid_config, "unknown scenario '" + gen_scenario + "'");
      const auto sim_data = csl::generate({*sc, gen_n, gen_seed, gen_replicate});
      csl::write_dataset_csv(sim_data.data, gen_out);
    }
  } catch (const csl::Error& e) {
    std::cerr << "error (" << csl::to_string(e.code()) << "): " << e.what() << '\n';
    return csl::exit_code(e.code());
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 3;
  }
  return 0;
}
