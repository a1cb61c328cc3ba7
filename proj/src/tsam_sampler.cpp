#include "volcal/tsam_sampler.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace volcal {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// Uniform in [0, 1) straight from the engine bits (53-bit mantissa). Keeping
// the acceptance stream free of distribution-object state makes checkpoints
// and the plain-AM comparison exact.
inline double next_uniform(std::mt19937_64& engine) {
  return static_cast<double>(engine() >> 11) * 0x1.0p-53;
}

// Plain lower-triangular Cholesky; false on a non-positive or non-finite
// pivot. a and l are dim x dim row-major, lower part of l is written.
bool cholesky_lower(const std::vector<double>& a, int dim, std::vector<double>& l) {
  l.assign(static_cast<std::size_t>(dim) * dim, 0.0);
  for (int i = 0; i < dim; ++i) {
    for (int j = 0; j <= i; ++j) {
      double acc = a[static_cast<std::size_t>(i) * dim + j];
      for (int k = 0; k < j; ++k)
        acc -= l[static_cast<std::size_t>(i) * dim + k] * l[static_cast<std::size_t>(j) * dim + k];
      if (i == j) {
        if (!(acc > 0.0) || !std::isfinite(acc)) return false;
        l[static_cast<std::size_t>(i) * dim + i] = std::sqrt(acc);
      } else {
        l[static_cast<std::size_t>(i) * dim + j] = acc / l[static_cast<std::size_t>(j) * dim + j];
      }
    }
  }
  return true;
}

double resolved_scale(const TsamConfig& cfg) {
  return cfg.scale > 0.0 ? cfg.scale : 2.38 * 2.38 / cfg.dim;
}

// Proposal covariance at iteration t (1-based): fixed diagonal before
// adapt_start, scaled empirical covariance plus ridge afterwards.
void proposal_covariance(const TsamConfig& cfg, long t, const RunningMoments& moments,
                         std::vector<double>& cov) {
  const int d = cfg.dim;
  if (t < cfg.adapt_start || moments.count() < 2) {
    cov.assign(static_cast<std::size_t>(d) * d, 0.0);
    for (int i = 0; i < d; ++i) cov[static_cast<std::size_t>(i) * d + i] = cfg.c0_diag[i];
    return;
  }
  cov.resize(static_cast<std::size_t>(d) * d);
  moments.covariance(cov);
  const double s = resolved_scale(cfg);
  for (double& c : cov) c *= s;
  for (int i = 0; i < d; ++i) cov[static_cast<std::size_t>(i) * d + i] += s * cfg.eps_reg;
}

// Factor with one ridge-bump retry, per the sampler contract.
void factor_with_retry(const TsamConfig& cfg, std::vector<double>& cov, std::vector<double>& chol) {
  if (cholesky_lower(cov, cfg.dim, chol)) return;
  const double bump = resolved_scale(cfg) * cfg.eps_reg * 1000.0;
  for (int i = 0; i < cfg.dim; ++i) cov[static_cast<std::size_t>(i) * cfg.dim + i] += bump;
  if (cholesky_lower(cov, cfg.dim, chol)) return;
  throw CovarianceFactorizationError("proposal covariance not positive definite after ridge retry");
}

void draw_candidate(const std::vector<double>& state, const std::vector<double>& chol, int dim,
                    std::mt19937_64& engine, std::normal_distribution<double>& normal,
                    std::vector<double>& z, std::vector<double>& candidate) {
  z.resize(dim);
  for (int i = 0; i < dim; ++i) z[i] = normal(engine);
  candidate.resize(dim);
  for (int i = 0; i < dim; ++i) {
    double acc = state[i];
    for (int j = 0; j <= i; ++j) acc += chol[static_cast<std::size_t>(i) * dim + j] * z[j];
    candidate[i] = acc;
  }
}

void validate_config(const TsamConfig& cfg) {
  if (cfg.dim < 1) throw ConfigError("sampler dimension must be positive");
  if (cfg.total_iters < 0 || cfg.burn_in < 0 || cfg.burn_in > cfg.total_iters)
    throw ConfigError("need 0 <= burn_in <= total_iters");
  if (cfg.thin < 1) throw ConfigError("thin must be >= 1");
  if (static_cast<int>(cfg.c0_diag.size()) != cfg.dim)
    throw ConfigError("c0_diag must have one variance per dimension");
  for (double v : cfg.c0_diag)
    if (!(v > 0.0)) throw ConfigError("c0_diag entries must be positive");
}

}  // namespace

// ---------------------------------------------------------------------------
// RunningMoments

RunningMoments::RunningMoments(int dim) : dim_(dim) {
  mean_.assign(dim, 0.0);
  m2_.assign(static_cast<std::size_t>(dim) * dim, 0.0);
  delta_.assign(dim, 0.0);
}

void RunningMoments::update(std::span<const double> x) {
  if (static_cast<int>(x.size()) != dim_) throw DimensionMismatchError("moments update size mismatch");
  ++n_;
  for (int i = 0; i < dim_; ++i) delta_[i] = x[i] - mean_[i];
  for (int i = 0; i < dim_; ++i) mean_[i] += delta_[i] / static_cast<double>(n_);
  for (int i = 0; i < dim_; ++i)
    for (int j = 0; j < dim_; ++j)
      m2_[static_cast<std::size_t>(i) * dim_ + j] += delta_[i] * (x[j] - mean_[j]);
}

void RunningMoments::covariance(std::span<double> out) const {
  if (static_cast<int>(out.size()) != dim_ * dim_)
    throw DimensionMismatchError("covariance output size mismatch");
  if (n_ < 2) throw Error("covariance needs at least two updates");
  for (std::size_t k = 0; k < m2_.size(); ++k) out[k] = m2_[k] / static_cast<double>(n_ - 1);
}

void RunningMoments::restore(long n, std::span<const double> mean, std::span<const double> m2) {
  if (static_cast<int>(mean.size()) != dim_ || static_cast<int>(m2.size()) != dim_ * dim_)
    throw DimensionMismatchError("moments restore size mismatch");
  n_ = n;
  std::copy(mean.begin(), mean.end(), mean_.begin());
  std::copy(m2.begin(), m2.end(), m2_.begin());
}

// ---------------------------------------------------------------------------
// TsamSampler

TsamSampler::TsamSampler(const TsamConfig& config, LogTarget log_coarse, LogTarget log_fine)
    : cfg_(config),
      coarse_(std::move(log_coarse)),
      fine_(std::move(log_fine)),
      moments_(config.dim),
      prop_engine_(config.seed),
      acc_engine_(config.seed ^ 0x9e3779b97f4a7c15ULL) {
  validate_config(cfg_);
  state_.assign(cfg_.dim, 0.0);
}

ChainRecord TsamSampler::run(std::span<const double> initial) {
  if (!restored_) {
    if (static_cast<int>(initial.size()) != cfg_.dim)
      throw DimensionMismatchError("initial state size mismatch");
    state_.assign(initial.begin(), initial.end());
    log_c_ = coarse_(state_);
    ++counters_.coarse_evals;
    log_f_valid_ = false;
    iters_done_ = 0;
    moments_.update(state_);
  }

  ChainRecord record;
  std::vector<double> candidate, z;

  for (long t = iters_done_ + 1; t <= cfg_.total_iters; ++t) {
    proposal_covariance(cfg_, t, moments_, cov_);
    factor_with_retry(cfg_, cov_, chol_);
    draw_candidate(state_, chol_, cfg_.dim, prop_engine_, normal_, z, candidate);
    ++counters_.proposals;

    const double log_c_cand = coarse_(candidate);
    ++counters_.coarse_evals;

    // Stage 1: screen against the coarse target. Exactly one uniform is
    // consumed here whatever the outcome, mirroring plain Metropolis.
    const double u1 = next_uniform(acc_engine_);
    if (std::log(u1) < log_c_cand - log_c_) {
      ++counters_.stage1_passes;
      // The fine value of the current state is only needed once a proposal
      // survives screening; evaluating it lazily keeps a never-promoted
      // prefix of the chain at pure coarse cost.
      if (!log_f_valid_) {
        log_f_ = fine_(state_);
        ++counters_.fine_evals;
        log_f_valid_ = true;
      }
      const double log_f_cand = fine_(candidate);
      ++counters_.fine_evals;

      // Stage 2 correction ratio. When it is >= 0 (always the case if the
      // two fidelities coincide) acceptance is certain and no uniform is
      // drawn, keeping the acceptance stream aligned with plain AM.
      const double log_alpha2 = (log_f_cand - log_f_) + (log_c_ - log_c_cand);
      bool accept = true;
      if (log_alpha2 < 0.0) accept = std::log(next_uniform(acc_engine_)) < log_alpha2;
      if (accept) {
        state_ = candidate;
        log_c_ = log_c_cand;
        log_f_ = log_f_cand;
        ++counters_.stage2_accepts;
      }
    }

    moments_.update(state_);
    iters_done_ = t;
    if (t > cfg_.burn_in && (t - cfg_.burn_in) % cfg_.thin == 0) record.samples.push_back(state_);
  }

  record.counters = counters_;
  record.final_state = state_;
  record.final_log_coarse = log_c_;
  record.final_log_fine = log_f_;
  record.final_log_fine_valid = log_f_valid_;
  return record;
}

SamplerCheckpoint TsamSampler::snapshot() const {
  SamplerCheckpoint cp;
  cp.iters_done = iters_done_;
  cp.state = state_;
  cp.log_coarse = log_c_;
  cp.log_fine = log_f_;
  cp.log_fine_valid = log_f_valid_;
  cp.counters = counters_;
  cp.moments_n = moments_.count();
  cp.moments_mean.assign(moments_.mean().begin(), moments_.mean().end());
  cp.moments_m2.assign(moments_.raw_m2().begin(), moments_.raw_m2().end());
  std::ostringstream prop;
  prop << prop_engine_ << ' ' << normal_;
  cp.rng_proposal = prop.str();
  std::ostringstream acc;
  acc << acc_engine_;
  cp.rng_accept = acc.str();
  return cp;
}

void TsamSampler::restore(const SamplerCheckpoint& cp) {
  if (static_cast<int>(cp.state.size()) != cfg_.dim)
    throw CheckpointError("checkpoint dimension does not match sampler config");
  iters_done_ = cp.iters_done;
  state_ = cp.state;
  log_c_ = cp.log_coarse;
  log_f_ = cp.log_fine;
  log_f_valid_ = cp.log_fine_valid;
  counters_ = cp.counters;
  moments_.restore(cp.moments_n, cp.moments_mean, cp.moments_m2);
  std::istringstream prop(cp.rng_proposal);
  prop >> prop_engine_ >> normal_;
  std::istringstream acc(cp.rng_accept);
  acc >> acc_engine_;
  if (!prop || !acc) throw CheckpointError("cannot parse checkpoint RNG state");
  restored_ = true;
}

// ---------------------------------------------------------------------------
// Reference single-fidelity sampler

ChainRecord run_adaptive_metropolis(const TsamConfig& config, const LogTarget& target,
                                    std::span<const double> initial) {
  validate_config(config);
  if (static_cast<int>(initial.size()) != config.dim)
    throw DimensionMismatchError("initial state size mismatch");

  std::mt19937_64 prop_engine(config.seed);
  std::mt19937_64 acc_engine(config.seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> normal;

  RunningMoments moments(config.dim);
  std::vector<double> state(initial.begin(), initial.end());
  double log_t = target(state);
  moments.update(state);

  ChainRecord record;
  record.counters.coarse_evals = 1;
  std::vector<double> cov, chol, z, candidate;

  for (long t = 1; t <= config.total_iters; ++t) {
    proposal_covariance(config, t, moments, cov);
    factor_with_retry(config, cov, chol);
    draw_candidate(state, chol, config.dim, prop_engine, normal, z, candidate);
    ++record.counters.proposals;

    const double log_t_cand = target(candidate);
    ++record.counters.coarse_evals;
    const double u = next_uniform(acc_engine);
    if (std::log(u) < log_t_cand - log_t) {
      state = candidate;
      log_t = log_t_cand;
      ++record.counters.stage1_passes;
      ++record.counters.stage2_accepts;
    }

    moments.update(state);
    if (t > config.burn_in && (t - config.burn_in) % config.thin == 0)
      record.samples.push_back(state);
  }

  record.final_state = state;
  record.final_log_coarse = log_t;
  record.final_log_fine = log_t;
  record.final_log_fine_valid = true;
  return record;
}

// ---------------------------------------------------------------------------
// Diagnostics

double effective_sample_size(std::span<const double> series) {
  const long n = static_cast<long>(series.size());
  if (n < 2) return 1.0;

  double mean = 0.0;
  for (double x : series) mean += x;
  mean /= static_cast<double>(n);

  auto autocov = [&](long lag) {
    double acc = 0.0;
    for (long i = 0; i + lag < n; ++i) acc += (series[i] - mean) * (series[i + lag] - mean);
    return acc / static_cast<double>(n);
  };

  const double c0 = autocov(0);
  if (!(c0 > 0.0)) return 1.0;  // constant series

  // Geyer initial monotone sequence: sum successive even/odd autocovariance
  // pairs while positive, enforcing nonincreasing partial sums.
  double tau = -c0;
  double prev_pair = std::numeric_limits<double>::infinity();
  for (long m = 0; 2 * m + 1 < n; ++m) {
    double pair = autocov(2 * m) + autocov(2 * m + 1);
    if (pair <= 0.0) break;
    pair = std::min(pair, prev_pair);
    tau += 2.0 * pair;
    prev_pair = pair;
  }
  if (!(tau > 0.0)) return 1.0;
  const double ess = static_cast<double>(n) * c0 / tau;
  return std::clamp(ess, 1.0, static_cast<double>(n));
}

ChainDiagnostics compute_diagnostics(const ChainRecord& record) {
  ChainDiagnostics d;
  const ChainCounters& c = record.counters;
  if (c.proposals > 0) {
    d.stage1_pass_rate = static_cast<double>(c.stage1_passes) / static_cast<double>(c.proposals);
    d.overall_accept_rate =
        static_cast<double>(c.stage2_accepts) / static_cast<double>(c.proposals);
  }
  if (c.stage1_passes > 0)
    d.stage2_accept_rate = static_cast<double>(c.stage2_accepts) / static_cast<double>(c.stage1_passes);

  if (!record.samples.empty()) {
    const std::size_t dim = record.samples.front().size();
    std::vector<double> series(record.samples.size());
    d.ess.resize(dim);
    for (std::size_t k = 0; k < dim; ++k) {
      for (std::size_t i = 0; i < record.samples.size(); ++i) series[i] = record.samples[i][k];
      d.ess[k] = effective_sample_size(series);
    }
  }
  return d;
}

}  // namespace volcal
