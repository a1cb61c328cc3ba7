#include "doctest.h"

#include <cmath>
#include <limits>
#include <vector>

#include "volcal/fem_pricer.hpp"
#include "volcal/kl_prior.hpp"
#include "volcal/posterior.hpp"

using namespace volcal;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

MarketParams case_market() {
  MarketParams p;
  p.spot = 100.0;
  p.rate = 0.05;
  p.dividend = 0.02;
  p.t_max = 1.5;
  p.k_min = 40.0;
  p.k_max = 215.0;
  return p;
}

// Small, fully deterministic training set: quotes priced at constant 20% vol.
std::vector<OptionQuote> constant_vol_quotes(const MarketParams& params) {
  std::vector<OptionQuote> quotes;
  for (double t : {0.5, 1.0})
    for (double k : {80.0, 90.0, 100.0, 110.0, 120.0})
      quotes.push_back(
          {t, k, bs_call_price(params.spot, k, t, params.rate, params.dividend, 0.2),
           QuoteRole::train});
  return quotes;
}

PriorConfig small_prior() {
  PriorConfig prior;
  prior.measure_t = {0.0, 0.68};
  prior.measure_k = {0.0, 0.68};
  prior.max_per_dim = 12;
  prior.n_kl = 6;
  prior.mean_log_vol = std::log(0.2);
  return prior;
}

PosteriorEvaluator small_evaluator(const MarketParams& params) {
  MeshConfig coarse = mesh_config(MeshLevel::coarse);
  MeshConfig fine = mesh_config(MeshLevel::fine);
  fine.strike_nodes = 21;
  fine.time_levels = 21;
  return PosteriorEvaluator(constant_vol_quotes(params), params, small_prior(), PosteriorHyper{},
                            coarse, fine);
}

}  // namespace

TEST_SUITE("posterior") {

TEST_CASE("parameter state round-trips through the flat vector layout") {
  ParameterState state;
  state.theta = {0.1, -0.2, 0.3};
  state.l_t = 0.6;
  state.l_k = 0.9;
  state.sigma_y = 1.4;
  const std::vector<double> x = state.to_vector();
  REQUIRE(x.size() == 6);
  CHECK(x[0] == 0.1);
  CHECK(x[3] == 0.6);
  CHECK(x[4] == 0.9);
  CHECK(x[5] == 1.4);
  const ParameterState back = ParameterState::from_vector(x);
  CHECK(back.theta == state.theta);
  CHECK(back.l_t == state.l_t);
  CHECK(back.l_k == state.l_k);
  CHECK(back.sigma_y == state.sigma_y);
  CHECK_THROWS_AS(ParameterState::from_vector(std::vector<double>{1.0, 2.0, 3.0}),
                  DimensionMismatchError);
}

TEST_CASE("marginal likelihood matches the closed form worked by hand") {
  // n = 2, a = 2, b = 1, residual (1,1):
  //   lgamma(3) - 3 log(1 + 1) = ln 2 - 3 ln 2 = -2 ln 2.
  PosteriorHyper hyper;
  hyper.a_eps = 2.0;
  hyper.b_eps = 1.0;
  const std::vector<double> observed{1.0, 1.0};
  const std::vector<double> model{0.0, 0.0};
  CHECK(log_marginal_likelihood(observed, model, hyper) ==
        doctest::Approx(-2.0 * std::log(2.0)).epsilon(1e-14));
  const std::vector<double> short_model{0.0};
  CHECK_THROWS_AS(log_marginal_likelihood(observed, short_model, hyper), LengthMismatchError);
}

TEST_CASE("marginal likelihood decreases with the residual norm") {
  PosteriorHyper hyper;
  const std::vector<double> observed{1.0, 2.0, 3.0};
  double prev = kInf;
  for (double shift : {0.0, 0.1, 0.5, 2.0}) {
    std::vector<double> model{1.0 + shift, 2.0 + shift, 3.0 + shift};
    const double value = log_marginal_likelihood(observed, model, hyper);
    CHECK(value < prev);
    prev = value;
  }
}

TEST_CASE("log prior composes its three blocks as written") {
  PosteriorHyper hyper;  // a_s = 3, b_s = 2, box [0.5, 1]
  ParameterState state;
  state.theta = {0.3, -0.2};
  state.l_t = 0.7;
  state.l_k = 0.9;
  state.sigma_y = 0.8;
  const double var = 0.64;
  const double expect =
      -0.5 * (0.09 + 0.04) + (hyper.a_s - 1.0) * std::log(var) - var / hyper.b_s;
  CHECK(log_prior(state, hyper) == doctest::Approx(expect).epsilon(1e-13));
}

TEST_CASE("log prior support boundaries produce minus infinity") {
  PosteriorHyper hyper;
  ParameterState state;
  state.theta = {0.0};
  state.l_t = 0.75;
  state.l_k = 0.75;
  state.sigma_y = 1.0;
  CHECK(std::isfinite(log_prior(state, hyper)));
  ParameterState bad = state;
  bad.l_t = 0.49;
  CHECK(log_prior(bad, hyper) == -kInf);
  bad = state;
  bad.l_k = 1.01;
  CHECK(log_prior(bad, hyper) == -kInf);
  bad = state;
  bad.sigma_y = 0.0;
  CHECK(log_prior(bad, hyper) == -kInf);
  bad = state;
  bad.sigma_y = -0.3;
  CHECK(log_prior(bad, hyper) == -kInf);
}

TEST_CASE("posterior value equals prior plus marginal of the repriced quotes") {
  const MarketParams params = case_market();
  PosteriorEvaluator eval = small_evaluator(params);
  ParameterState state;
  state.theta.assign(6, 0.0);
  state.theta[0] = 0.3;
  state.l_t = 0.7;
  state.l_k = 0.8;
  state.sigma_y = 0.9;

  const LogDensity post = eval.log_posterior(state, Fidelity::fine);
  const std::vector<double> model =
      eval.model_prices(state, Fidelity::fine, eval.train_quotes());
  std::vector<double> observed;
  for (const OptionQuote& q : eval.train_quotes()) observed.push_back(q.mid);
  const double expect =
      log_prior(state, eval.hyper()) + log_marginal_likelihood(observed, model, eval.hyper());
  CHECK(post.value == doctest::Approx(expect).epsilon(1e-10));
  CHECK(post.fidelity == Fidelity::fine);
}

TEST_CASE("solve counters track the fidelity actually used") {
  const MarketParams params = case_market();
  PosteriorEvaluator eval = small_evaluator(params);
  ParameterState state;
  state.theta.assign(6, 0.0);
  CHECK(eval.coarse_solves() == 0);
  CHECK(eval.fine_solves() == 0);
  eval.log_posterior(state, Fidelity::coarse);
  CHECK(eval.coarse_solves() == 1);
  CHECK(eval.fine_solves() == 0);
  eval.log_posterior(state, Fidelity::fine);
  CHECK(eval.coarse_solves() == 1);
  CHECK(eval.fine_solves() == 1);
}

TEST_CASE("states outside the prior support skip the solver entirely") {
  const MarketParams params = case_market();
  PosteriorEvaluator eval = small_evaluator(params);
  ParameterState state;
  state.theta.assign(6, 0.0);
  state.l_t = 2.0;  // outside the box
  const LogDensity post = eval.log_posterior(state, Fidelity::coarse);
  CHECK(post.value == -kInf);
  CHECK(eval.coarse_solves() == 0);
}

TEST_CASE("solver blow-ups yield minus infinity and are counted") {
  const MarketParams params = case_market();
  PosteriorEvaluator eval = small_evaluator(params);
  ParameterState state;
  state.theta.assign(6, 0.0);
  state.theta[0] = 1e4;  // exp overflow in the vol field
  const LogDensity post = eval.log_posterior(state, Fidelity::coarse);
  CHECK(post.value == -kInf);
  CHECK(eval.blowups() == 1);
}

TEST_CASE("a mismatched theta length is rejected") {
  const MarketParams params = case_market();
  PosteriorEvaluator eval = small_evaluator(params);
  ParameterState state;
  state.theta.assign(4, 0.0);  // evaluator fixed n_kl = 6
  CHECK_THROWS_AS(eval.log_posterior(state, Fidelity::fine), DimensionMismatchError);
}

TEST_CASE("at the truth the posterior prefers the truth over perturbations") {
  // Quotes were generated at constant 20% vol, which the prior mean encodes
  // exactly (mu_Y = log 0.2, theta = 0). Any sizable theta kick should lower
  // the posterior.
  const MarketParams params = case_market();
  PosteriorEvaluator eval = small_evaluator(params);
  ParameterState truth;
  truth.theta.assign(6, 0.0);
  ParameterState kicked = truth;
  kicked.theta[0] = 1.0;
  const double at_truth = eval.log_posterior(truth, Fidelity::fine).value;
  const double at_kick = eval.log_posterior(kicked, Fidelity::fine).value;
  CHECK(at_truth > at_kick);
}

TEST_CASE("model prices agree with a hand-assembled solve on the same mesh") {
  const MarketParams params = case_market();
  MeshConfig fine = mesh_config(MeshLevel::fine);
  fine.strike_nodes = 21;
  fine.time_levels = 21;
  std::vector<OptionQuote> quotes = constant_vol_quotes(params);
  PosteriorEvaluator eval(quotes, params, small_prior(), PosteriorHyper{},
                          mesh_config(MeshLevel::coarse), fine);
  ParameterState state;
  state.theta.assign(6, 0.0);
  state.theta[2] = 0.5;
  state.l_t = 0.6;
  state.l_k = 0.85;
  state.sigma_y = 1.2;

  const std::vector<double> got = eval.model_prices(state, Fidelity::fine, quotes);

  // Same pipeline, assembled by hand from the public pieces.
  std::vector<double> maturities;
  for (const OptionQuote& q : quotes) maturities.push_back(q.maturity);
  auto [mesh, grid] = build_mesh(params, fine, maturities);
  KlBasis basis = build_tensor_basis(state.l_t, state.l_k, small_prior().measure_t,
                                     small_prior().measure_k, small_prior().max_per_dim,
                                     small_prior().mean_log_vol, state.sigma_y);
  basis.n_kl = 6;
  DomainMap map{params.t_max, params.k_min, params.k_max};
  std::vector<double> us, vs;
  for (double t : grid.times) us.push_back(map.u_of_t(t));
  for (double k : mesh.nodes) vs.push_back(map.v_of_k(k));
  const std::vector<double> vol = eval_vol_grid(basis, state.theta, us, vs);
  PdeCoefficients coeffs;
  coeffs.rate = params.rate;
  coeffs.dividend = params.dividend;
  coeffs.spot = params.spot;
  const int nn = mesh.n_nodes();
  coeffs.sigma = [&vol, nn](int level, int node) {
    return vol[static_cast<std::size_t>(level) * nn + node];
  };
  const std::vector<double> field = price_surface(mesh, grid, coeffs);
  for (std::size_t i = 0; i < quotes.size(); ++i)
    CHECK(got[i] == doctest::Approx(extract_price(field, mesh, grid, quotes[i].maturity,
                                                  quotes[i].strike))
                        .epsilon(1e-12));
}

TEST_CASE("vol surface maps original units onto the unit square") {
  const MarketParams params = case_market();
  PosteriorEvaluator eval = small_evaluator(params);
  ParameterState state;
  state.theta.assign(6, 0.0);
  state.theta[1] = -0.4;
  const std::vector<double> mats{0.0, 0.75, 1.5};
  const std::vector<double> strikes{60.0, 100.0, 180.0};
  const std::vector<double> got = eval.vol_surface(state, mats, strikes);

  KlBasis basis = build_tensor_basis(state.l_t, state.l_k, small_prior().measure_t,
                                     small_prior().measure_k, small_prior().max_per_dim,
                                     small_prior().mean_log_vol, state.sigma_y);
  basis.n_kl = 6;
  DomainMap map{params.t_max, params.k_min, params.k_max};
  std::vector<double> us, vs;
  for (double t : mats) us.push_back(map.u_of_t(t));
  for (double k : strikes) vs.push_back(map.v_of_k(k));
  const std::vector<double> expect = eval_vol_grid(basis, state.theta, us, vs);
  for (std::size_t i = 0; i < got.size(); ++i)
    CHECK(got[i] == doctest::Approx(expect[i]).epsilon(1e-12));
}

TEST_CASE("validation maturities must be spliced in to be priceable") {
  const MarketParams params = case_market();
  MeshConfig fine = mesh_config(MeshLevel::fine);
  fine.strike_nodes = 21;
  fine.time_levels = 21;
  std::vector<OptionQuote> train = constant_vol_quotes(params);
  OptionQuote holdout{1.37, 100.0,
                      bs_call_price(params.spot, 100.0, 1.37, params.rate, params.dividend, 0.2),
                      QuoteRole::validate};
  ParameterState state;
  state.theta.assign(6, 0.0);

  PosteriorEvaluator without(train, params, small_prior(), PosteriorHyper{},
                             mesh_config(MeshLevel::coarse), fine);
  std::vector<OptionQuote> both = train;
  both.push_back(holdout);
  CHECK_THROWS_AS(without.model_prices(state, Fidelity::fine, both), MaturityNotOnGridError);

  const std::vector<double> extra{holdout.maturity};
  PosteriorEvaluator with(train, params, small_prior(), PosteriorHyper{},
                          mesh_config(MeshLevel::coarse), fine, extra);
  const std::vector<double> prices = with.model_prices(state, Fidelity::fine, both);
  CHECK(prices.back() == doctest::Approx(holdout.mid).epsilon(0.02));
}

TEST_CASE("an empty training set is rejected at construction") {
  const MarketParams params = case_market();
  CHECK_THROWS_AS(PosteriorEvaluator({}, params, small_prior(), PosteriorHyper{},
                                     mesh_config(MeshLevel::coarse),
                                     mesh_config(MeshLevel::fine)),
                  EmptyTrainingSetError);
}

}  // TEST_SUITE
