// Command-line front end: synthetic data generation, calibration, pricing,
// chain summaries and resume-from-checkpoint.
#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "volcal/errors.hpp"
#include "volcal/experiment.hpp"

namespace {

namespace fs = std::filesystem;

// Exit code 2: the inputs are wrong (config, flags, quote file structure).
// Exit code 3: the inputs parsed but the computation failed.
bool is_input_error(const volcal::Error& e) {
  return dynamic_cast<const volcal::ConfigError*>(&e) ||
         dynamic_cast<const volcal::UnknownCaseError*>(&e) ||
         dynamic_cast<const volcal::MissingColumnError*>(&e) ||
         dynamic_cast<const volcal::NonPositiveStrikeError*>(&e) ||
         dynamic_cast<const volcal::DuplicateQuoteError*>(&e) ||
         dynamic_cast<const volcal::MalformedRowError*>(&e) ||
         dynamic_cast<const volcal::DegenerateRangeError*>(&e) ||
         dynamic_cast<const volcal::EmptyTrainingSetError*>(&e);
}

void print_result(const volcal::CalibrationResult& result) {
  std::cout << "n_kl=" << result.n_kl << " mu_y=" << result.mu_y << " b_eps=" << result.b_eps
            << "\n";
  for (std::size_t i = 0; i < result.chains.size(); ++i) {
    const volcal::ChainOutput& c = result.chains[i];
    std::cout << "chain " << i << ": samples=" << c.n_samples
              << " stage1_pass=" << c.diagnostics.stage1_pass_rate
              << " accept=" << c.diagnostics.overall_accept_rate
              << " fine_evals=" << c.counters.fine_evals << " -> " << c.checkpoint_path << "\n";
  }
  std::cout << "wrote " << result.vol_summary_path << "\n";
  std::cout << "wrote " << result.price_summary_path << "\n";
  std::cout << "wrote " << result.manifest_path << "\n";
}

std::vector<std::string> find_chain_files(const std::string& dir) {
  std::vector<std::string> paths;
  if (!fs::is_directory(dir)) return paths;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("chain_", 0) == 0 && entry.path().extension() == ".csv")
      paths.push_back(entry.path().string());
  }
  std::sort(paths.begin(), paths.end());
  return paths;
}

struct CommonFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> chains;
  std::optional<std::string> out;
  bool dump_solution = false;
};

void add_common(CLI::App* cmd, CommonFlags& flags, bool with_chains) {
  cmd->add_option("--config", flags.config_path, "JSON config (or manifest) file")->required();
  cmd->add_option("--seed", [&flags](const std::vector<std::string>& v) {
        flags.seed = std::stoull(v[0]);
        return true;
      },
      "override the config's RNG seed");
  if (with_chains)
    cmd->add_option("--chains", [&flags](const std::vector<std::string>& v) {
          flags.chains = std::stoi(v[0]);
          return true;
        },
        "override the number of chains");
  cmd->add_option("--out", [&flags](const std::vector<std::string>& v) {
        flags.out = v[0];
        return true;
      },
      "override the output directory");
  cmd->add_flag("--dump-solution", flags.dump_solution,
                "also write the full fine-mesh price surface as CSV");
}

volcal::RunOverrides to_overrides(const CommonFlags& flags) {
  volcal::RunOverrides o;
  o.seed = flags.seed;
  o.chains = flags.chains;
  o.output_dir = flags.out;
  o.dump_solution = flags.dump_solution;
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bayesian local volatility calibration"};
  app.require_subcommand(1);

  // generate-synthetic
  int case_id = 1;
  double noise_frac = 0.001;
  std::uint64_t gen_seed = 1234;
  std::string gen_out = "synthetic";
  CLI::App* gen = app.add_subcommand("generate-synthetic", "write a synthetic quote set");
  gen->add_option("--case", case_id, "benchmark case (1, 2 or 3)")->required();
  gen->add_option("--noise", noise_frac, "noise sd as a fraction of the mean reference price");
  gen->add_option("--seed", gen_seed, "RNG seed for truth draw and noise");
  gen->add_option("--out", gen_out, "output directory");

  CommonFlags cal_flags;
  CLI::App* cal = app.add_subcommand("calibrate", "run the posterior sampler");
  add_common(cal, cal_flags, true);

  CommonFlags price_flags;
  std::string surface_csv;
  CLI::App* price = app.add_subcommand("price", "one forward solve with a given surface");
  add_common(price, price_flags, false);
  price->add_option("--surface", surface_csv, "maturity,strike,sigma CSV grid")->required();

  CommonFlags sum_flags;
  std::vector<std::string> chain_paths;
  CLI::App* sum = app.add_subcommand("summarize", "rebuild summaries from chain files");
  add_common(sum, sum_flags, false);
  sum->add_option("chains", chain_paths, "chain files (default: chain_*.csv in the output dir)");

  CommonFlags res_flags;
  std::string checkpoint_path;
  CLI::App* res = app.add_subcommand("resume", "continue a checkpointed chain");
  add_common(res, res_flags, false);
  res->add_option("--checkpoint", checkpoint_path, "chain file to continue")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) {
      volcal::SyntheticPaths paths =
          volcal::generate_synthetic(case_id, noise_frac, gen_seed, gen_out);
      std::cout << "wrote " << paths.quotes << "\n";
      std::cout << "wrote " << paths.truth << "\n";
      std::cout << "wrote " << paths.config << "\n";
    } else if (cal->parsed()) {
      volcal::RunConfig cfg = volcal::load_run_config(cal_flags.config_path);
      print_result(volcal::run_calibration(cfg, to_overrides(cal_flags)));
    } else if (price->parsed()) {
      volcal::RunConfig cfg = volcal::load_run_config(price_flags.config_path);
      std::cout << "wrote "
                << volcal::price_with_surface(cfg, surface_csv, to_overrides(price_flags)) << "\n";
    } else if (sum->parsed()) {
      volcal::RunConfig cfg = volcal::load_run_config(sum_flags.config_path);
      std::vector<std::string> paths = chain_paths;
      if (paths.empty())
        paths = find_chain_files(sum_flags.out ? *sum_flags.out : cfg.output_dir);
      print_result(volcal::summarize_chains(cfg, paths, to_overrides(sum_flags)));
    } else if (res->parsed()) {
      volcal::RunConfig cfg = volcal::load_run_config(res_flags.config_path);
      print_result(volcal::resume_calibration(cfg, checkpoint_path, to_overrides(res_flags)));
    }
  } catch (const volcal::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return is_input_error(e) ? 2 : 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
