#include "doctest.h"

#include <Eigen/Dense>
#include <cmath>
#include <random>
#include <sstream>
#include <vector>

#include "volcal/fem_pricer.hpp"

using namespace volcal;

namespace {

MarketParams standard_market() {
  MarketParams p;
  p.spot = 100.0;
  p.rate = 0.05;
  p.dividend = 0.02;
  p.t_max = 1.5;
  p.k_min = 40.0;
  p.k_max = 215.0;
  return p;
}

PdeCoefficients constant_vol(const MarketParams& params, double vol) {
  PdeCoefficients c;
  c.rate = params.rate;
  c.dividend = params.dividend;
  c.spot = params.spot;
  c.sigma = [vol](int, int) { return vol; };
  return c;
}

// Fills a banded matrix and a dense mirror with the same random entries.
void random_banded(BandedMatrix& banded, Eigen::MatrixXd& dense, std::mt19937_64& engine) {
  const int n = banded.size();
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  dense.setZero();
  for (int i = 0; i < n; ++i)
    for (int j = std::max(0, i - 2); j <= std::min(n - 1, i + 2); ++j) {
      // Strong convection-like asymmetry plus a weak diagonal, so pivoting
      // actually matters.
      double v = unit(engine) + (i == j ? 0.3 : 0.0) + (j == i + 1 ? 2.0 : 0.0);
      banded.at(i, j) = v;
      dense(i, j) = v;
    }
}

}  // namespace

TEST_SUITE("fem_pricer") {

TEST_CASE("banded LU agrees with a dense solver on asymmetric systems") {
  std::mt19937_64 engine(11);
  for (int trial = 0; trial < 8; ++trial) {
    const int n = 31;
    BandedMatrix banded(n);
    Eigen::MatrixXd dense(n, n);
    random_banded(banded, dense, engine);

    Eigen::VectorXd rhs(n);
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    for (int i = 0; i < n; ++i) rhs[i] = unit(engine);

    const Eigen::VectorXd expect = dense.partialPivLu().solve(rhs);
    std::vector<double> x(rhs.data(), rhs.data() + n);
    banded.solve_in_place(x);
    for (int i = 0; i < n; ++i) CHECK(x[i] == doctest::Approx(expect[i]).epsilon(1e-9));
  }
}

TEST_CASE("banded accessors enforce the bandwidth") {
  BandedMatrix m(10);
  m.at(3, 5) = 1.0;
  m.at(5, 3) = 2.0;
  CHECK(m.at(3, 5) == 1.0);
  const BandedMatrix& cm = m;
  CHECK(cm.at(0, 9) == 0.0);  // outside the band, const read gives zero
  CHECK_THROWS_AS(m.at(0, 9) = 1.0, IndexOutOfRangeError);
  CHECK_THROWS_AS(m.at(9, 0) = 1.0, IndexOutOfRangeError);
}

TEST_CASE("an exactly singular system is reported") {
  BandedMatrix m(5);  // all zeros
  std::vector<double> rhs(5, 1.0);
  CHECK_THROWS_AS(m.solve_in_place(rhs), SingularSystemError);
}

TEST_CASE("multiply refuses a factored matrix") {
  BandedMatrix m(5);
  for (int i = 0; i < 5; ++i) m.at(i, i) = 2.0;
  std::vector<double> rhs(5, 1.0);
  m.solve_in_place(rhs);
  std::vector<double> y(5);
  CHECK_THROWS_AS(m.multiply(rhs, y), Error);
}

TEST_CASE("mesh pins the spot, keeps nodes increasing, honors quote maturities") {
  const MarketParams params = standard_market();
  auto [mesh, grid] = build_mesh(params, mesh_config(MeshLevel::fine), std::vector<double>{0.37, 1.0});
  CHECK(mesh.n_nodes() == 51);
  bool spot_found = false;
  for (int i = 1; i < mesh.n_nodes(); ++i) {
    CHECK(mesh.nodes[i] > mesh.nodes[i - 1]);
    if (std::abs(mesh.nodes[i] - params.spot) < 1e-9) spot_found = true;
  }
  CHECK(spot_found);
  CHECK(mesh.nodes.front() == doctest::Approx(params.k_min));
  CHECK(mesh.nodes.back() == doctest::Approx(params.k_max));
  // Interior nodes sit at element midpoints.
  for (int e = 0; e < mesh.n_elements(); ++e)
    CHECK(mesh.nodes[2 * e + 1] ==
          doctest::Approx(0.5 * (mesh.nodes[2 * e] + mesh.nodes[2 * e + 2])).epsilon(1e-13));
  CHECK(grid.times.front() == 0.0);
  CHECK(grid.times.back() == doctest::Approx(params.t_max));
  CHECK_NOTHROW(grid.level_of(0.37));
  CHECK_NOTHROW(grid.level_of(1.0));
  CHECK_THROWS_AS(grid.level_of(0.123456), MaturityNotOnGridError);
}

TEST_CASE("density stretch concentrates nodes around the spot band") {
  const MarketParams params = standard_market();
  auto [mesh, grid] = build_mesh(params, mesh_config(MeshLevel::fine), {});
  auto spacing_near = [&](double strike) {
    const int e = mesh.element_of(strike);
    return mesh.element_width(e);
  };
  CHECK(spacing_near(100.0) < 0.5 * spacing_near(210.0));
  CHECK(spacing_near(100.0) < 0.5 * spacing_near(45.0));
}

TEST_CASE("mesh construction rejects bad configurations") {
  const MarketParams params = standard_market();
  MeshConfig cfg = mesh_config(MeshLevel::fine);
  cfg.strike_nodes = 50;  // even
  CHECK_THROWS_AS(build_mesh(params, cfg, {}), TooFewNodesError);
  cfg.strike_nodes = 3;
  CHECK_THROWS_AS(build_mesh(params, cfg, {}), TooFewNodesError);
  cfg = mesh_config(MeshLevel::fine);
  cfg.time_levels = 1;
  CHECK_THROWS_AS(build_mesh(params, cfg, {}), TooFewNodesError);
  cfg = mesh_config(MeshLevel::fine);
  cfg.stretch = 0.5;
  CHECK_THROWS_AS(build_mesh(params, cfg, {}), ConfigError);
  cfg = mesh_config(MeshLevel::fine);
  CHECK_THROWS_AS(build_mesh(params, cfg, std::vector<double>{2.0}), ConfigError);
}

TEST_CASE("element lookup covers the domain and rejects outside strikes") {
  const MarketParams params = standard_market();
  auto [mesh, grid] = build_mesh(params, mesh_config(MeshLevel::coarse), {});
  for (double k = params.k_min; k <= params.k_max; k += 1.37) {
    const int e = mesh.element_of(k);
    CHECK(mesh.nodes[2 * e] <= k + 1e-9);
    CHECK(k <= mesh.nodes[2 * e + 2] + 1e-9);
  }
  CHECK_THROWS_AS(mesh.element_of(params.k_min - 1.0), StrikeOutOfDomainError);
  CHECK_THROWS_AS(mesh.element_of(params.k_max + 1.0), StrikeOutOfDomainError);
}

TEST_CASE("mass matrix is symmetric, banded, and integrates to the domain length") {
  const MarketParams params = standard_market();
  auto [mesh, grid] = build_mesh(params, mesh_config(MeshLevel::fine), {});
  const BandedMatrix mass = assemble_mass(mesh);
  const int n = mass.size();
  double total = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      CHECK(mass.at(i, j) == mass.at(j, i));
      if (std::abs(i - j) > 2) CHECK(mass.at(i, j) == 0.0);
      total += mass.at(i, j);
    }
  // sum_ij M_ij = integral of (sum_i N_i)(sum_j N_j) = domain length.
  CHECK(total == doctest::Approx(params.k_max - params.k_min).epsilon(1e-12));
}

TEST_CASE("stiffness acting on constants reduces to the dividend mass term") {
  // Row sums: sum_q J_pq = integral of q * N_p, because sum_q N_q = 1 kills
  // the derivative terms pointwise. Checked against q * (M * 1).
  const MarketParams params = standard_market();
  auto [mesh, grid] = build_mesh(params, mesh_config(MeshLevel::fine), {});
  std::vector<double> sigma(mesh.n_nodes());
  for (int i = 0; i < mesh.n_nodes(); ++i) sigma[i] = 0.2 + 0.001 * i;
  const BandedMatrix stiff = assemble_stiffness(mesh, sigma, params.rate, params.dividend);
  const BandedMatrix mass = assemble_mass(mesh);
  const int n = mesh.n_nodes();
  std::vector<double> ones(n, 1.0), j_ones(n), m_ones(n);
  stiff.multiply(ones, j_ones);
  mass.multiply(ones, m_ones);
  for (int i = 0; i < n; ++i)
    CHECK(j_ones[i] == doctest::Approx(params.dividend * m_ones[i]).epsilon(1e-11));
}

TEST_CASE("stiffness assembly rejects non-positive or non-finite volatility") {
  const MarketParams params = standard_market();
  auto [mesh, grid] = build_mesh(params, mesh_config(MeshLevel::coarse), {});
  std::vector<double> sigma(mesh.n_nodes(), 0.2);
  sigma[3] = 0.0;
  CHECK_THROWS_AS(assemble_stiffness(mesh, sigma, params.rate, params.dividend),
                  NonPositiveVolatilityError);
  sigma[3] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(assemble_stiffness(mesh, sigma, params.rate, params.dividend),
                  NonPositiveVolatilityError);
  sigma.pop_back();
  CHECK_THROWS_AS(assemble_stiffness(mesh, sigma, params.rate, params.dividend),
                  DimensionMismatchError);
}

TEST_CASE("fine solve reproduces black-scholes inside the quoted region") {
  const MarketParams params = standard_market();
  const std::vector<double> quote_mats{0.25, 0.5, 0.75, 1.0, 1.25, 1.5};
  auto [mesh, grid] = build_mesh(params, mesh_config(MeshLevel::fine), quote_mats);
  const std::vector<double> field = price_surface(mesh, grid, constant_vol(params, 0.2));

  double worst = 0.0;
  for (double t : quote_mats)
    for (double k = 80.0; k <= 120.0 + 1e-9; k += 1.0) {
      const double got = extract_price(field, mesh, grid, t, k);
      const double want = bs_call_price(params.spot, k, t, params.rate, params.dividend, 0.2);
      worst = std::max(worst, std::abs(got - want) / want);
    }
  CHECK(worst < 0.005);
}

TEST_CASE("refinement shrinks the pricing error monotonically") {
  const MarketParams params = standard_market();
  const std::vector<double> quote_mats{0.5, 1.0, 1.5};
  auto error_at = [&](int resolution) {
    MeshConfig cfg = mesh_config(MeshLevel::fine);
    cfg.strike_nodes = resolution;
    cfg.time_levels = resolution;
    auto [mesh, grid] = build_mesh(params, cfg, quote_mats);
    const std::vector<double> field = price_surface(mesh, grid, constant_vol(params, 0.2));
    double worst = 0.0;
    for (double t : quote_mats)
      for (double k = 80.0; k <= 120.0 + 1e-9; k += 2.0) {
        const double want = bs_call_price(params.spot, k, t, params.rate, params.dividend, 0.2);
        worst = std::max(worst, std::abs(extract_price(field, mesh, grid, t, k) - want) / want);
      }
    return worst;
  };
  const double e11 = error_at(11);
  const double e21 = error_at(21);
  const double e51 = error_at(51);
  CHECK(e21 < e11);
  CHECK(e51 < e21);
  CHECK(e51 < 0.005);
}

TEST_CASE("boundary values hold exactly after the sweep") {
  const MarketParams params = standard_market();
  auto [mesh, grid] = build_mesh(params, mesh_config(MeshLevel::fine), std::vector<double>{1.0});
  FemWorkspace workspace(mesh, grid);
  const std::vector<double>& field = workspace.solve(constant_vol(params, 0.2));
  for (int n = 1; n < grid.n_levels(); ++n) {
    const double t = grid.times[n];
    const double left = std::exp(-params.rate * t) * (params.spot - params.k_min);
    CHECK(field[n * mesh.n_nodes()] == doctest::Approx(left).epsilon(1e-12));
    CHECK(field[n * mesh.n_nodes() + mesh.n_nodes() - 1] == doctest::Approx(0.0));
  }
}

TEST_CASE("payoff initial condition is sampled exactly at the nodes") {
  const MarketParams params = standard_market();
  auto [mesh, grid] = build_mesh(params, mesh_config(MeshLevel::coarse), {});
  FemWorkspace workspace(mesh, grid);
  const std::vector<double>& field = workspace.solve(constant_vol(params, 0.2));
  for (int i = 0; i < mesh.n_nodes(); ++i)
    CHECK(field[i] == std::max(params.spot - mesh.nodes[i], 0.0));
}

TEST_CASE("prices stay arbitrage-shaped across element boundaries") {
  // Shape is checked on the floored (extracted) values at the element
  // boundaries; the C0 quadratic interpolant is not globally convex between
  // them and is not required to be. On the fine mesh the two elements next
  // to each end are excluded: the clamped value at K_min discounts the full
  // intrinsic at the risk-free rate, which undershoots the dividend-adjusted
  // deep-ITM price and bends the solution in a layer the fine mesh resolves
  // (the coarse mesh cannot, so it is held to the whole domain). Tolerances
  // are a tenth of a cent of slope change and a hundredth of a cent of
  // monotonicity: early time levels carry start-up transients of a few 1e-4
  // in the deep-ITM and far-OTM regions where the exact solution has zero
  // curvature, so a tighter gate would measure transients, not arbitrage.
  const MarketParams params = standard_market();
  for (MeshLevel level : {MeshLevel::coarse, MeshLevel::fine}) {
    auto [mesh, grid] = build_mesh(params, mesh_config(level), std::vector<double>{0.5, 1.0, 1.5});
    const std::vector<double> field = price_surface(mesh, grid, constant_vol(params, 0.2));
    const std::size_t lo = level == MeshLevel::coarse ? 0 : 2;
    const std::size_t hi = static_cast<std::size_t>(mesh.n_elements()) -
                           (level == MeshLevel::coarse ? 0 : 2);
    for (int n = 0; n < grid.n_levels(); ++n) {
      std::vector<double> v;
      for (int e = 0; e <= mesh.n_elements(); ++e) {
        const double raw = field[static_cast<std::size_t>(n) * mesh.n_nodes() + 2 * e];
        CHECK(std::isfinite(raw));
        v.push_back(std::max(raw, 0.0));
      }
      for (std::size_t i = lo; i + 1 <= hi; ++i) CHECK(v[i + 1] <= v[i] + 1e-4);
      for (std::size_t i = lo; i + 2 <= hi; ++i) {
        const double h1 = mesh.nodes[2 * i + 2] - mesh.nodes[2 * i];
        const double h2 = mesh.nodes[2 * i + 4] - mesh.nodes[2 * i + 2];
        const double second = (v[i + 2] - v[i + 1]) / h2 - (v[i + 1] - v[i]) / h1;
        CHECK(second >= -1e-3);
      }
    }
  }
}

TEST_CASE("extraction reproduces quadratics exactly within an element") {
  // With quadratic shape functions, nodal samples of any quadratic in K are
  // interpolated without error.
  const MarketParams params = standard_market();
  auto [mesh, grid] = build_mesh(params, mesh_config(MeshLevel::coarse), {});
  std::vector<double> field(grid.n_levels() * mesh.n_nodes(), 0.0);
  auto f = [](double k) { return 3.0 + 0.5 * k + 0.01 * k * k; };
  for (int i = 0; i < mesh.n_nodes(); ++i) field[i] = f(mesh.nodes[i]);  // level 0
  for (double k = params.k_min; k <= params.k_max; k += 3.7)
    CHECK(extract_price(field, mesh, grid, 0.0, k) == doctest::Approx(f(k)).epsilon(1e-12));
  CHECK_THROWS_AS(extract_price(field, mesh, grid, 0.0, params.k_max + 1.0),
                  StrikeOutOfDomainError);
  CHECK_THROWS_AS(extract_price(field, mesh, grid, 0.123, params.spot), MaturityNotOnGridError);
}

TEST_CASE("negative interpolated values are floored at extraction only") {
  const MarketParams params = standard_market();
  auto [mesh, grid] = build_mesh(params, mesh_config(MeshLevel::coarse), {});
  std::vector<double> field(grid.n_levels() * mesh.n_nodes(), -1.0);
  CHECK(extract_price(field, mesh, grid, 0.0, params.spot) == 0.0);
}

TEST_CASE("solution dump writes the documented CSV layout") {
  const MarketParams params = standard_market();
  MeshConfig cfg = mesh_config(MeshLevel::coarse);
  cfg.time_levels = 3;
  cfg.strike_nodes = 5;
  auto [mesh, grid] = build_mesh(params, cfg, {});
  const std::vector<double> field = price_surface(mesh, grid, constant_vol(params, 0.2));
  std::ostringstream out;
  dump_solution(out, field, mesh, grid);
  std::istringstream in(out.str());
  std::string header;
  std::getline(in, header);
  CHECK(header == "maturity,strike,price");
  int rows = 0;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) ++rows;
  CHECK(rows == grid.n_levels() * mesh.n_nodes());
}

}  // TEST_SUITE
