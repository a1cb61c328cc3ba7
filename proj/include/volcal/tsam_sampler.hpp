#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "volcal/errors.hpp"

namespace volcal {

// Running mean and scatter (Welford) over parameter vectors; covariance uses
// the 1/(n-1) normalization. Shared by the sampler and by reference
// implementations in tests so proposal streams can be compared bit for bit.
class RunningMoments {
 public:
  explicit RunningMoments(int dim = 0);

  void update(std::span<const double> x);
  long count() const { return n_; }
  int dim() const { return dim_; }
  std::span<const double> mean() const { return mean_; }
  // Writes the dim x dim sample covariance (row-major) into out.
  void covariance(std::span<double> out) const;

  // Checkpoint plumbing.
  std::span<const double> raw_m2() const { return m2_; }
  void restore(long n, std::span<const double> mean, std::span<const double> m2);

 private:
  int dim_ = 0;
  long n_ = 0;
  std::vector<double> mean_;
  std::vector<double> m2_;  // sum of outer products of deviations
  std::vector<double> delta_;
};

using LogTarget = std::function<double(std::span<const double>)>;

struct TsamConfig {
  int dim = 0;
  long total_iters = 0;
  long burn_in = 0;
  int thin = 1;
  long adapt_start = 1000;      // t0: iterations before the empirical covariance kicks in
  double scale = 0.0;           // s_d; <= 0 means 2.38^2 / dim
  double eps_reg = 1e-6;        // ridge added as s_d * eps * I
  std::vector<double> c0_diag;  // pre-adaptation proposal variances, size dim
  std::uint64_t seed = 0;
};

struct ChainCounters {
  long proposals = 0;
  long stage1_passes = 0;
  long stage2_accepts = 0;
  long coarse_evals = 0;
  long fine_evals = 0;
};

struct ChainRecord {
  std::vector<std::vector<double>> samples;  // post burn-in, thinned
  ChainCounters counters;
  std::vector<double> final_state;
  double final_log_coarse = 0.0;
  double final_log_fine = 0.0;
  bool final_log_fine_valid = false;
};

// Serializable mid-run snapshot; enough to continue a chain bitwise.
struct SamplerCheckpoint {
  long iters_done = 0;
  std::vector<double> state;
  double log_coarse = 0.0;
  double log_fine = 0.0;
  bool log_fine_valid = false;
  ChainCounters counters;
  long moments_n = 0;
  std::vector<double> moments_mean;
  std::vector<double> moments_m2;
  std::string rng_proposal;  // engine + normal distribution state
  std::string rng_accept;    // engine state
};

// Two-stage adaptive Metropolis. Every proposal is screened against the
// coarse target; only survivors are promoted to a fine evaluation, with the
// second acceptance ratio correcting the screening bias so the chain targets
// the fine posterior exactly. The proposal covariance adapts from the full
// history (s_d cov + s_d eps I after adapt_start iterations, c0 before).
class TsamSampler {
 public:
  TsamSampler(const TsamConfig& config, LogTarget log_coarse, LogTarget log_fine);

  // Runs iterations iters_done+1 .. total_iters, recording post-burn-in
  // thinned states. Call restore() first to continue from a checkpoint.
  ChainRecord run(std::span<const double> initial);

  SamplerCheckpoint snapshot() const;
  void restore(const SamplerCheckpoint& cp);
  // Samples recorded before a snapshot are owned by the caller; run()
  // returns only the ones from the iterations it executed.

  const ChainCounters& counters() const { return counters_; }

 private:
  TsamConfig cfg_;
  LogTarget coarse_;
  LogTarget fine_;

  std::vector<double> state_;
  double log_c_ = 0.0;
  double log_f_ = 0.0;
  bool log_f_valid_ = false;
  long iters_done_ = 0;
  bool restored_ = false;

  RunningMoments moments_;
  std::vector<double> cov_;   // dim x dim scratch
  std::vector<double> chol_;  // lower factor

  ChainCounters counters_;

  std::mt19937_64 prop_engine_;
  std::mt19937_64 acc_engine_;
  std::normal_distribution<double> normal_;
};

// Plain single-fidelity adaptive Metropolis step-for-step comparable with
// TsamSampler when coarse == fine (same RNG discipline: dim normals plus
// exactly one acceptance uniform per iteration).
ChainRecord run_adaptive_metropolis(const TsamConfig& config, const LogTarget& target,
                                    std::span<const double> initial);

// Effective sample size of one scalar series via the initial monotone
// sequence estimator on sample autocovariances; floored at 1. A constant
// series returns 1.
double effective_sample_size(std::span<const double> series);

struct ChainDiagnostics {
  double stage1_pass_rate = 0.0;
  double stage2_accept_rate = 0.0;   // accepts / stage-1 passes
  double overall_accept_rate = 0.0;  // accepts / proposals
  std::vector<double> ess;           // per coordinate of the thinned samples
};
ChainDiagnostics compute_diagnostics(const ChainRecord& record);

}  // namespace volcal
