#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "volcal/market_data.hpp"
#include "volcal/posterior.hpp"
#include "volcal/tsam_sampler.hpp"

namespace volcal {

// Everything a calibration run needs, loaded from a JSON config file. A
// manifest written by a previous run can be loaded directly (its embedded
// config echo is used), which is how bitwise re-runs are done.
struct RunConfig {
  MarketParams market;
  std::string quotes_path;
  SplitRule split;

  // Prior basis.
  double sigma_mu = 0.68;
  double energy_threshold = 0.90;
  int max_per_dim = 24;
  int n_kl = 0;          // 0: choose from energy_threshold at midpoint lengthscales
  double mu_y = 0.0;     // used when mu_y_auto is false
  bool mu_y_auto = true; // log implied vol of the near-spot training quote

  PosteriorHyper hyper;
  bool b_eps_auto = true;       // scale so prior-mean noise sd = noise_prior_frac * mean mid
  double noise_prior_frac = 0.005;

  MeshConfig coarse_mesh = mesh_config(MeshLevel::coarse);
  MeshConfig fine_mesh = mesh_config(MeshLevel::fine);
  bool band_from_quotes = true;  // mesh band defaults to the quoted strike range

  // Sampler.
  long total_iters = 20000;
  long burn_in = 2000;
  int thin = 10;
  long adapt_start = 1000;
  double scale = 0.0;  // 0: 2.38^2 / dim
  double eps_reg = 1e-6;
  double c0_theta = 0.01;       // variances, not sds
  double c0_lengthscale = 0.0025;
  double c0_sigma = 0.01;
  double init_sigma_y = 1.0;
  int chains = 1;

  std::uint64_t seed = 1234;
  int report_grid = 41;
  std::string output_dir = "out";

  std::string echo_json;  // canonical JSON echo for the manifest
};

RunConfig load_run_config(const std::string& path);
RunConfig parse_run_config(const std::string& json_text);

// Synthetic benchmark cases:
//   1: sigma(K) = 15/K (absolute-diffusion benchmark), maturities {0.5, 1, 1.5}
//   2: sigma(T,K) = 0.3 e^{-T} (100/K)^0.2, eight maturities in [0.25, 2]
//   3: surface drawn from the K-L prior itself (l_t = 0.5, l_k = 0.7, sigma_Y = 1)
// Reference prices come from a 201x201 solve; centered Gaussian noise with
// sd = noise_frac * mean reference price is added to the mids. Writes
// quotes.csv, truth.csv and a ready-to-run config.json into out_dir.
struct SyntheticPaths {
  std::string quotes;
  std::string truth;
  std::string config;
};
SyntheticPaths generate_synthetic(int case_id, double noise_frac, std::uint64_t seed,
                                  const std::string& out_dir);

// The analytic truth surfaces behind cases 1 and 2 (case 3 is seed-dependent).
double synthetic_truth_vol(int case_id, double maturity, double strike);

struct ChainOutput {
  std::string checkpoint_path;
  ChainCounters counters;
  ChainDiagnostics diagnostics;
  long n_samples = 0;
};

struct CalibrationResult {
  std::vector<ChainOutput> chains;
  std::string manifest_path;
  std::string diagnostics_path;
  std::string vol_summary_path;
  std::string price_summary_path;
  int n_kl = 0;
  double mu_y = 0.0;
  double b_eps = 0.0;
};

struct RunOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<int> chains;
  std::optional<std::string> output_dir;
  bool dump_solution = false;
};

// Full pipeline: load quotes, split, build posterior, run the chains
// (one thread each), write checkpoints, summaries, manifest, diagnostics.
CalibrationResult run_calibration(const RunConfig& config, const RunOverrides& overrides = {});

// Recomputes summary files from existing chain checkpoints.
CalibrationResult summarize_chains(const RunConfig& config, const std::vector<std::string>& chain_paths,
                                   const RunOverrides& overrides = {});

// Continues one checkpointed chain to config.total_iters, then rewrites the
// summaries from the extended chain. Bitwise identical to an uninterrupted
// run with the same config and seed.
CalibrationResult resume_calibration(const RunConfig& config, const std::string& checkpoint_path,
                                     const RunOverrides& overrides = {});

// One forward solve with a volatility surface read from a CSV grid
// (columns maturity,strike,sigma forming a full tensor grid); writes model
// prices at the config's quote points.
std::string price_with_surface(const RunConfig& config, const std::string& surface_csv,
                               const RunOverrides& overrides = {});

// Chain checkpoint I/O ("volcal-chain-v1": JSON header line plus one CSV row
// per stored sample).
struct ChainFile {
  SamplerCheckpoint checkpoint;
  std::vector<std::vector<double>> samples;
  std::uint64_t seed = 0;
  int chain_index = 0;
  long total_iters = 0;
  long burn_in = 0;
  int thin = 1;
};
void write_chain_file(const std::string& path, const ChainFile& chain);
ChainFile read_chain_file(const std::string& path);

}  // namespace volcal
