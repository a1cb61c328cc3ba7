#include "volcal/posterior.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace volcal {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
}

std::vector<double> ParameterState::to_vector() const {
  std::vector<double> x(theta.begin(), theta.end());
  x.push_back(l_t);
  x.push_back(l_k);
  x.push_back(sigma_y);
  return x;
}

ParameterState ParameterState::from_vector(std::span<const double> x) {
  if (x.size() < 4)
    throw DimensionMismatchError("parameter vector needs at least one theta plus (l_t, l_k, sigma_y)");
  ParameterState s;
  s.theta.assign(x.begin(), x.end() - 3);
  s.l_t = x[x.size() - 3];
  s.l_k = x[x.size() - 2];
  s.sigma_y = x[x.size() - 1];
  return s;
}

double log_marginal_likelihood(std::span<const double> observed, std::span<const double> model,
                               const PosteriorHyper& hyper) {
  if (observed.size() != model.size()) {
    std::ostringstream msg;
    msg << "observed has " << observed.size() << " entries, model has " << model.size();
    throw LengthMismatchError(msg.str());
  }
  double ss = 0.0;
  for (std::size_t i = 0; i < observed.size(); ++i) {
    const double r = observed[i] - model[i];
    ss += r * r;
  }
  const double shape = hyper.a_eps + 0.5 * static_cast<double>(observed.size());
  return std::lgamma(shape) - shape * std::log(hyper.b_eps + 0.5 * ss);
}

double log_prior(const ParameterState& state, const PosteriorHyper& hyper) {
  if (state.l_t < hyper.l_lo || state.l_t > hyper.l_hi) return kNegInf;
  if (state.l_k < hyper.l_lo || state.l_k > hyper.l_hi) return kNegInf;
  if (!(state.sigma_y > 0.0)) return kNegInf;

  double quad = 0.0;
  for (double t : state.theta) quad += t * t;
  const double var = state.sigma_y * state.sigma_y;
  return -0.5 * quad + (hyper.a_s - 1.0) * std::log(var) - var / hyper.b_s;
}

PosteriorEvaluator::ExtractionSlot PosteriorEvaluator::make_slot(const FidelityContext& ctx,
                                                                 double maturity, double strike) {
  ExtractionSlot slot;
  const int level = ctx.grid.level_of(maturity);
  const int e = ctx.mesh.element_of(strike);
  const double k1 = ctx.mesh.nodes[2 * e], k3 = ctx.mesh.nodes[2 * e + 2];
  const double xi = (2.0 * strike - k1 - k3) / (k3 - k1);
  slot.offset = static_cast<std::size_t>(level) * ctx.mesh.n_nodes() + 2 * e;
  slot.w[0] = -0.5 * xi * (1.0 - xi);
  slot.w[1] = 1.0 - xi * xi;
  slot.w[2] = 0.5 * xi * (1.0 + xi);
  return slot;
}

PosteriorEvaluator::PosteriorEvaluator(std::vector<OptionQuote> train_quotes,
                                       const MarketParams& params, const PriorConfig& prior,
                                       const PosteriorHyper& hyper, const MeshConfig& coarse,
                                       const MeshConfig& fine,
                                       std::span<const double> extra_maturities)
    : train_(std::move(train_quotes)), params_(params), prior_(prior), hyper_(hyper) {
  params_.validate();
  if (train_.empty()) throw EmptyTrainingSetError("posterior needs at least one training quote");
  if (prior_.n_kl < 1 || prior_.n_kl > prior_.max_per_dim * prior_.max_per_dim)
    throw DimensionMismatchError("n_kl must lie in [1, max_per_dim^2]");

  map_.t_max = params_.t_max;
  map_.k_min = params_.k_min;
  map_.k_max = params_.k_max;

  std::vector<double> maturities;
  maturities.reserve(train_.size() + extra_maturities.size());
  for (const OptionQuote& q : train_) maturities.push_back(q.maturity);
  maturities.insert(maturities.end(), extra_maturities.begin(), extra_maturities.end());

  observed_.reserve(train_.size());
  for (const OptionQuote& q : train_) observed_.push_back(q.mid);

  auto init_context = [&](FidelityContext& ctx, const MeshConfig& cfg) {
    auto [mesh, grid] = build_mesh(params_, cfg, maturities);
    ctx.mesh = std::move(mesh);
    ctx.grid = std::move(grid);
    ctx.workspace = std::make_unique<FemWorkspace>(ctx.mesh, ctx.grid);
    ctx.node_v.resize(ctx.mesh.n_nodes());
    for (int i = 0; i < ctx.mesh.n_nodes(); ++i) ctx.node_v[i] = map_.v_of_k(ctx.mesh.nodes[i]);
    ctx.level_u.resize(ctx.grid.n_levels());
    for (int n = 0; n < ctx.grid.n_levels(); ++n) ctx.level_u[n] = map_.u_of_t(ctx.grid.times[n]);
    ctx.train_slots.reserve(train_.size());
    for (const OptionQuote& q : train_)
      ctx.train_slots.push_back(make_slot(ctx, q.maturity, q.strike));
  };
  init_context(coarse_, coarse);
  init_context(fine_, fine);
}

const KlBasis& PosteriorEvaluator::basis_for(const ParameterState& state) const {
  if (basis_cache_ && basis_cache_->l_t == state.l_t && basis_cache_->l_k == state.l_k &&
      basis_cache_->prior_sd == state.sigma_y)
    return *basis_cache_;
  KlBasis basis = build_tensor_basis(state.l_t, state.l_k, prior_.measure_t, prior_.measure_k,
                                     prior_.max_per_dim, prior_.mean_log_vol, state.sigma_y);
  basis.n_kl = prior_.n_kl;
  basis_cache_ = std::move(basis);
  return *basis_cache_;
}

bool PosteriorEvaluator::reprice_training(const ParameterState& state, Fidelity fidelity,
                                          std::vector<double>& out) {
  FidelityContext& ctx = context(fidelity);
  const KlBasis& basis = basis_for(state);

  std::vector<double> vol =
      eval_vol_grid(basis, state.theta, ctx.level_u, ctx.node_v);  // level x node

  PdeCoefficients coeffs;
  coeffs.rate = params_.rate;
  coeffs.dividend = params_.dividend;
  coeffs.spot = params_.spot;
  const int nn = ctx.mesh.n_nodes();
  coeffs.sigma = [&vol, nn](int level, int node) {
    return vol[static_cast<std::size_t>(level) * nn + node];
  };

  (fidelity == Fidelity::coarse ? coarse_solves_ : fine_solves_) += 1;
  const std::vector<double>* field = nullptr;
  try {
    field = &ctx.workspace->solve(coeffs);
  } catch (const Error&) {
    ++blowups_;
    return false;
  }
  for (double v : *field) {
    if (!std::isfinite(v)) {
      ++blowups_;
      return false;
    }
  }

  out.resize(train_.size());
  for (std::size_t i = 0; i < train_.size(); ++i) {
    const ExtractionSlot& slot = ctx.train_slots[i];
    const double* u = field->data() + slot.offset;
    out[i] = std::max(slot.w[0] * u[0] + slot.w[1] * u[1] + slot.w[2] * u[2], 0.0);
  }
  return true;
}

LogDensity PosteriorEvaluator::log_posterior(const ParameterState& state, Fidelity fidelity) {
  LogDensity result;
  result.fidelity = fidelity;

  const double lp = log_prior(state, hyper_);
  if (lp == kNegInf) {
    result.value = kNegInf;
    return result;
  }
  if (static_cast<int>(state.theta.size()) != prior_.n_kl) {
    std::ostringstream msg;
    msg << "state has " << state.theta.size() << " theta entries, run uses " << prior_.n_kl;
    throw DimensionMismatchError(msg.str());
  }

  std::vector<double> model;
  if (!reprice_training(state, fidelity, model)) {
    result.value = kNegInf;
    return result;
  }
  result.value = lp + log_marginal_likelihood(observed_, model, hyper_);
  return result;
}

std::vector<double> PosteriorEvaluator::model_prices(const ParameterState& state, Fidelity fidelity,
                                                     std::span<const OptionQuote> quotes) {
  FidelityContext& ctx = context(fidelity);
  const KlBasis& basis = basis_for(state);
  std::vector<double> vol = eval_vol_grid(basis, state.theta, ctx.level_u, ctx.node_v);

  PdeCoefficients coeffs;
  coeffs.rate = params_.rate;
  coeffs.dividend = params_.dividend;
  coeffs.spot = params_.spot;
  const int nn = ctx.mesh.n_nodes();
  coeffs.sigma = [&vol, nn](int level, int node) {
    return vol[static_cast<std::size_t>(level) * nn + node];
  };

  (fidelity == Fidelity::coarse ? coarse_solves_ : fine_solves_) += 1;
  const std::vector<double>& field = ctx.workspace->solve(coeffs);

  std::vector<double> out;
  out.reserve(quotes.size());
  for (const OptionQuote& q : quotes)
    out.push_back(extract_price(field, ctx.mesh, ctx.grid, q.maturity, q.strike));
  return out;
}

std::vector<double> PosteriorEvaluator::vol_surface(const ParameterState& state,
                                                    std::span<const double> maturities,
                                                    std::span<const double> strikes) const {
  const KlBasis& basis = basis_for(state);
  std::vector<double> us(maturities.size()), vs(strikes.size());
  for (std::size_t i = 0; i < maturities.size(); ++i) us[i] = map_.u_of_t(maturities[i]);
  for (std::size_t j = 0; j < strikes.size(); ++j) vs[j] = map_.v_of_k(strikes[j]);
  return eval_vol_grid(basis, state.theta, us, vs);
}

}  // namespace volcal
