#pragma once

#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "volcal/fem_pricer.hpp"
#include "volcal/kl_prior.hpp"
#include "volcal/market_data.hpp"

namespace volcal {

// Calibration parameters: K-L coefficients, the two kernel lengthscales and
// the prior amplitude sigma_Y. Flattened as [theta..., l_t, l_k, sigma_y]
// for the sampler.
struct ParameterState {
  std::vector<double> theta;
  double l_t = 0.75;
  double l_k = 0.75;
  double sigma_y = 1.0;

  int dim() const { return static_cast<int>(theta.size()) + 3; }
  std::vector<double> to_vector() const;
  static ParameterState from_vector(std::span<const double> x);
};

struct PosteriorHyper {
  // Inverse-gamma prior on the observation noise variance; the noise is
  // marginalized analytically so only (a_eps, b_eps) enter the likelihood.
  double a_eps = 2.5;
  double b_eps = 1e-4;
  // Gamma(shape a_s, scale b_s) prior on sigma_Y^2.
  double a_s = 3.0;
  double b_s = 2.0;
  // Uniform box prior on both lengthscales.
  double l_lo = 0.5;
  double l_hi = 1.0;
};

enum class Fidelity { coarse, fine };

struct LogDensity {
  double value = 0.0;
  Fidelity fidelity = Fidelity::coarse;
};

// Marginal log-likelihood with the noise variance integrated out:
//   log Gamma(a_eps + n/2) - (a_eps + n/2) log(b_eps + ||obs - model||^2 / 2).
// Constant terms independent of the residual are dropped.
double log_marginal_likelihood(std::span<const double> observed,
                               std::span<const double> model, const PosteriorHyper& hyper);

// Log prior density (unnormalized): standard normal theta, Gamma on
// sigma_Y^2, uniform box on the lengthscales. -inf outside the support.
double log_prior(const ParameterState& state, const PosteriorHyper& hyper);

// Fixed ingredients of the K-L prior for a calibration run. The lengthscales
// live in the parameter state, so eigenpairs are rebuilt per evaluation
// (closed form, cheap); the truncation level n_kl stays fixed for the run.
struct PriorConfig {
  GaussianMeasure measure_t;
  GaussianMeasure measure_k;
  int max_per_dim = 24;
  int n_kl = 14;
  double mean_log_vol = 0.0;  // mu_Y
};

// Two-fidelity unnormalized log posterior over ParameterState. Holds the
// coarse and fine FEM contexts; one instance per thread (the workspaces are
// reused across evaluations and are not synchronized).
class PosteriorEvaluator {
 public:
  // extra_maturities (typically the validation quotes') are spliced into
  // both maturity grids so model_prices can reprice them without time
  // interpolation.
  PosteriorEvaluator(std::vector<OptionQuote> train_quotes, const MarketParams& params,
                     const PriorConfig& prior, const PosteriorHyper& hyper,
                     const MeshConfig& coarse, const MeshConfig& fine,
                     std::span<const double> extra_maturities = {});

  // Unnormalized log posterior at the given fidelity. Solver blow-ups
  // (non-finite field, singular step) yield -inf and bump the blowup
  // counter rather than throwing.
  LogDensity log_posterior(const ParameterState& state, Fidelity fidelity);

  // Model prices for an arbitrary quote list (used for predictive bands).
  std::vector<double> model_prices(const ParameterState& state, Fidelity fidelity,
                                   std::span<const OptionQuote> quotes);

  // Volatility surface exp(Y) on a (T, K) tensor grid in original units.
  std::vector<double> vol_surface(const ParameterState& state, std::span<const double> maturities,
                                  std::span<const double> strikes) const;

  const DomainMap& domain() const { return map_; }
  const MarketParams& params() const { return params_; }
  const PosteriorHyper& hyper() const { return hyper_; }
  const PriorConfig& prior_config() const { return prior_; }
  const std::vector<OptionQuote>& train_quotes() const { return train_; }

  long coarse_solves() const { return coarse_solves_; }
  long fine_solves() const { return fine_solves_; }
  long blowups() const { return blowups_; }

 private:
  // Field offset plus interpolation weights for one (T, K); state-free, so
  // computed once per quote per fidelity.
  struct ExtractionSlot {
    std::size_t offset = 0;  // level * n_nodes + first element node
    double w[3] = {0.0, 0.0, 0.0};
  };

  struct FidelityContext {
    StrikeMesh mesh;
    MaturityGrid grid;
    std::unique_ptr<FemWorkspace> workspace;
    std::vector<double> node_v;   // rescaled strike coordinate per node
    std::vector<double> level_u;  // rescaled time coordinate per level
    std::vector<ExtractionSlot> train_slots;
  };

  static ExtractionSlot make_slot(const FidelityContext& ctx, double maturity, double strike);

  const KlBasis& basis_for(const ParameterState& state) const;
  FidelityContext& context(Fidelity f) { return f == Fidelity::coarse ? coarse_ : fine_; }
  // Prices the training quotes; returns false on solver blow-up.
  bool reprice_training(const ParameterState& state, Fidelity fidelity,
                        std::vector<double>& out);

  std::vector<OptionQuote> train_;
  MarketParams params_;
  DomainMap map_;
  PriorConfig prior_;
  PosteriorHyper hyper_;
  FidelityContext coarse_;
  FidelityContext fine_;
  std::vector<double> observed_;

  // Single-slot basis cache keyed by (l_t, l_k, sigma_y); the sampler
  // evaluates coarse then fine at the same state back to back.
  mutable std::optional<KlBasis> basis_cache_;

  long coarse_solves_ = 0;
  long fine_solves_ = 0;
  long blowups_ = 0;
};

}  // namespace volcal
