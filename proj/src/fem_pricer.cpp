#include "volcal/fem_pricer.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <sstream>

namespace volcal {

namespace {

// 4-point Gauss-Legendre rule on [-1, 1]; exact through degree 7, enough for
// the quadratic-basis integrands with smooth coefficients.
constexpr double kGaussX[4] = {-0.8611363115940526, -0.3399810435848563, 0.3399810435848563,
                               0.8611363115940526};
constexpr double kGaussW[4] = {0.3478548451374538, 0.6521451548625461, 0.6521451548625461,
                               0.3478548451374538};

// Quadratic shape functions on the reference element xi in [-1, 1], nodes at
// xi = -1, 0, +1.
inline void shape(double xi, double n[3]) {
  n[0] = -0.5 * xi * (1.0 - xi);
  n[1] = 1.0 - xi * xi;
  n[2] = 0.5 * xi * (1.0 + xi);
}
inline void shape_deriv(double xi, double d[3]) {
  d[0] = xi - 0.5;
  d[1] = -2.0 * xi;
  d[2] = xi + 0.5;
}

// Element mass pattern: integral of N_p N_q over the element is
// (h/30) * kMass[p][q].
constexpr double kMass[3][3] = {{4.0, 2.0, -1.0}, {2.0, 16.0, 2.0}, {-1.0, 2.0, 4.0}};

}  // namespace

// ---------------------------------------------------------------------------
// BandedMatrix

BandedMatrix::BandedMatrix(int n) : n_(n) {
  band_.assign(static_cast<std::size_t>(2 * kl_ + ku_ + 1) * n, 0.0);
  pivots_.assign(n, 0);
}

double BandedMatrix::at(int i, int j) const {
  if (i < 0 || j < 0 || i >= n_ || j >= n_) throw IndexOutOfRangeError("band index out of range");
  if (i - j > kl_ || j - i > kl_ + ku_) return 0.0;
  return band_[static_cast<std::size_t>(kl_ + ku_ + i - j) * n_ + j];
}

double& BandedMatrix::at(int i, int j) {
  if (i < 0 || j < 0 || i >= n_ || j >= n_ || i - j > kl_ || j - i > kl_ + ku_)
    throw IndexOutOfRangeError("band index out of range");
  return band_[static_cast<std::size_t>(kl_ + ku_ + i - j) * n_ + j];
}

void BandedMatrix::clear() {
  std::fill(band_.begin(), band_.end(), 0.0);
  factored_ = false;
}

void BandedMatrix::multiply(std::span<const double> x, std::span<double> y) const {
  if (factored_) throw Error("BandedMatrix::multiply called after factorization");
  if (static_cast<int>(x.size()) != n_ || static_cast<int>(y.size()) != n_)
    throw DimensionMismatchError("BandedMatrix::multiply size mismatch");
  for (int i = 0; i < n_; ++i) {
    double acc = 0.0;
    const int lo = std::max(0, i - kl_), hi = std::min(n_ - 1, i + ku_);
    for (int j = lo; j <= hi; ++j)
      acc += band_[static_cast<std::size_t>(kl_ + ku_ + i - j) * n_ + j] * x[j];
    y[i] = acc;
  }
}

void BandedMatrix::solve_in_place(std::span<double> rhs) {
  if (static_cast<int>(rhs.size()) != n_) throw DimensionMismatchError("rhs size mismatch");
  auto entry = [&](int i, int j) -> double& {
    return band_[static_cast<std::size_t>(kl_ + ku_ + i - j) * n_ + j];
  };

  if (!factored_) {
    // Banded LU with partial pivoting; row swaps widen the upper band from
    // ku to ku + kl, which is what the fill rows are for.
    for (int k = 0; k < n_ - 1; ++k) {
      const int last_row = std::min(k + kl_, n_ - 1);
      int piv = k;
      for (int i = k + 1; i <= last_row; ++i)
        if (std::abs(entry(i, k)) > std::abs(entry(piv, k))) piv = i;
      if (entry(piv, k) == 0.0) throw SingularSystemError("zero pivot in banded LU");
      pivots_[k] = piv;

      const int last_col = std::min(k + kl_ + ku_, n_ - 1);
      if (piv != k)
        for (int j = k; j <= last_col; ++j) std::swap(entry(k, j), entry(piv, j));
      for (int i = k + 1; i <= last_row; ++i) {
        const double m = entry(i, k) / entry(k, k);
        entry(i, k) = m;
        for (int j = k + 1; j <= last_col; ++j) entry(i, j) -= m * entry(k, j);
      }
    }
    if (n_ > 0) {
      pivots_[n_ - 1] = n_ - 1;
      if (entry(n_ - 1, n_ - 1) == 0.0) throw SingularSystemError("zero pivot in banded LU");
    }
    factored_ = true;
  }

  for (int k = 0; k < n_ - 1; ++k) {
    if (pivots_[k] != k) std::swap(rhs[k], rhs[pivots_[k]]);
    const int last_row = std::min(k + kl_, n_ - 1);
    for (int i = k + 1; i <= last_row; ++i) rhs[i] -= entry(i, k) * rhs[k];
  }
  for (int i = n_ - 1; i >= 0; --i) {
    double acc = rhs[i];
    const int last_col = std::min(i + kl_ + ku_, n_ - 1);
    for (int j = i + 1; j <= last_col; ++j) acc -= entry(i, j) * rhs[j];
    rhs[i] = acc / entry(i, i);
  }
}

// ---------------------------------------------------------------------------
// Meshes

int StrikeMesh::element_of(double strike) const {
  const double lo = nodes.front(), hi = nodes.back();
  const double tol = 1e-9 * (hi - lo);
  if (strike < lo - tol || strike > hi + tol) {
    std::ostringstream msg;
    msg << "strike " << strike << " outside mesh domain [" << lo << ", " << hi << "]";
    throw StrikeOutOfDomainError(msg.str());
  }
  // Element boundaries are the even-index nodes.
  int lo_e = 0, hi_e = n_elements() - 1;
  while (lo_e < hi_e) {
    int mid = (lo_e + hi_e + 1) / 2;
    if (strike >= nodes[2 * mid])
      lo_e = mid;
    else
      hi_e = mid - 1;
  }
  return lo_e;
}

int MaturityGrid::level_of(double t) const {
  auto it = std::lower_bound(times.begin(), times.end(), t - 1e-10);
  if (it != times.end() && std::abs(*it - t) <= 1e-10)
    return static_cast<int>(it - times.begin());
  std::ostringstream msg;
  msg << "maturity " << t << " is not a grid level";
  throw MaturityNotOnGridError(msg.str());
}

MeshConfig mesh_config(MeshLevel level) {
  MeshConfig cfg;
  if (level == MeshLevel::coarse) {
    cfg.strike_nodes = 11;
    cfg.time_levels = 11;
  } else {
    cfg.strike_nodes = 51;
    cfg.time_levels = 51;
  }
  return cfg;
}

std::pair<StrikeMesh, MaturityGrid> build_mesh(const MarketParams& params, const MeshConfig& config,
                                               std::span<const double> quote_maturities) {
  params.validate();
  if (config.strike_nodes < 5 || config.strike_nodes % 2 == 0) {
    std::ostringstream msg;
    msg << "strike_nodes must be odd and >= 5, got " << config.strike_nodes;
    throw TooFewNodesError(msg.str());
  }
  if (config.time_levels < 2) {
    std::ostringstream msg;
    msg << "time_levels must be >= 2, got " << config.time_levels;
    throw TooFewNodesError(msg.str());
  }
  if (config.stretch < 1.0) throw ConfigError("mesh stretch must be >= 1");
  if (config.time_grading <= 0.0) throw ConfigError("time grading exponent must be positive");

  const int n_elem = (config.strike_nodes - 1) / 2;
  const double band_lo = config.band_lo > 0.0 ? config.band_lo : 0.78 * params.spot;
  const double band_hi = config.band_hi > 0.0 ? config.band_hi : 1.26 * params.spot;
  if (band_hi <= band_lo) throw ConfigError("mesh band_hi must exceed band_lo");
  const double shoulder = std::max(config.shoulder_frac * params.spot, 1e-12);

  // Element boundaries are quantiles of a plateau density: `stretch` times
  // denser across [band_lo, band_hi] than at the domain edges, rolling off
  // over the shoulder width. Concentrates resolution where quotes live
  // without the waste of a single-center stretched map.
  auto density = [&](double k) {
    double d = std::max({band_lo - k, 0.0, k - band_hi}) / shoulder;
    return 1.0 + (config.stretch - 1.0) * std::exp(-d * d);
  };
  constexpr int kGrid = 4000;
  std::vector<double> xs(kGrid + 1), cdf(kGrid + 1);
  cdf[0] = 0.0;
  xs[0] = params.k_min;
  for (int i = 1; i <= kGrid; ++i) {
    xs[i] = params.k_min + (params.k_max - params.k_min) * i / kGrid;
    cdf[i] = cdf[i - 1] + 0.5 * (density(xs[i - 1]) + density(xs[i])) * (xs[i] - xs[i - 1]);
  }
  for (double& c : cdf) c /= cdf[kGrid];

  std::vector<double> bounds(n_elem + 1);
  bounds[0] = params.k_min;
  bounds[n_elem] = params.k_max;
  for (int m = 1; m < n_elem; ++m) {
    const double level = static_cast<double>(m) / n_elem;
    auto it = std::lower_bound(cdf.begin(), cdf.end(), level);
    int hi = static_cast<int>(it - cdf.begin());
    hi = std::clamp(hi, 1, kGrid);
    const double frac = (level - cdf[hi - 1]) / (cdf[hi] - cdf[hi - 1]);
    bounds[m] = xs[hi - 1] + frac * (xs[hi] - xs[hi - 1]);
  }

  // Pin the nearest interior boundary to the spot so the payoff kink sits
  // exactly on a node; otherwise the kink pollutes the early time steps.
  int nearest = 1;
  for (int m = 2; m < n_elem; ++m)
    if (std::abs(bounds[m] - params.spot) < std::abs(bounds[nearest] - params.spot)) nearest = m;
  bounds[nearest] = params.spot;
  for (int m = 1; m <= n_elem; ++m)
    if (bounds[m] <= bounds[m - 1])
      throw ConfigError("mesh boundaries not strictly increasing after spot pinning");

  StrikeMesh mesh;
  mesh.spot = params.spot;
  mesh.nodes.resize(2 * n_elem + 1);
  for (int e = 0; e < n_elem; ++e) {
    mesh.nodes[2 * e] = bounds[e];
    mesh.nodes[2 * e + 1] = 0.5 * (bounds[e] + bounds[e + 1]);
  }
  mesh.nodes[2 * n_elem] = bounds[n_elem];

  // Power-graded time levels cluster steps near T = 0 where the payoff kink
  // makes the solution rough; the quote maturities are spliced in so prices
  // can be extracted without time interpolation.
  const int n_steps = config.time_levels - 1;
  std::vector<double> times(config.time_levels);
  for (int n = 0; n <= n_steps; ++n)
    times[n] = params.t_max * std::pow(static_cast<double>(n) / n_steps, config.time_grading);
  for (double t : quote_maturities) {
    if (t <= 0.0 || t > params.t_max + 1e-10) {
      std::ostringstream msg;
      msg << "quote maturity " << t << " outside (0, " << params.t_max << "]";
      throw ConfigError(msg.str());
    }
    times.push_back(std::min(t, params.t_max));
  }
  std::sort(times.begin(), times.end());
  MaturityGrid grid;
  grid.times.push_back(times.front());
  for (double t : times)
    if (t - grid.times.back() > 1e-10) grid.times.push_back(t);

  return {std::move(mesh), std::move(grid)};
}

// ---------------------------------------------------------------------------
// Assembly

BandedMatrix assemble_mass(const StrikeMesh& mesh) {
  BandedMatrix mass(mesh.n_nodes());
  for (int e = 0; e < mesh.n_elements(); ++e) {
    const double scale = mesh.element_width(e) / 30.0;
    const int base = 2 * e;
    for (int p = 0; p < 3; ++p)
      for (int q = 0; q < 3; ++q) mass.at(base + p, base + q) += scale * kMass[p][q];
  }
  return mass;
}

BandedMatrix assemble_stiffness(const StrikeMesh& mesh, std::span<const double> sigma_nodes,
                                double rate, double dividend) {
  const int n = mesh.n_nodes();
  if (static_cast<int>(sigma_nodes.size()) != n)
    throw DimensionMismatchError("sigma_nodes size does not match mesh");

  // g = 1/2 sigma^2 K^2 at the nodes, then dg/dK by second-order central
  // differences on the nonuniform node spacing (first-order one-sided at the
  // two boundary nodes).
  std::vector<double> g(n), gp(n);
  for (int i = 0; i < n; ++i) {
    const double s = sigma_nodes[i];
    if (!(s > 0.0) || !std::isfinite(s)) {
      std::ostringstream msg;
      msg << "volatility at node " << i << " (K = " << mesh.nodes[i] << ") is " << s;
      throw NonPositiveVolatilityError(msg.str());
    }
    g[i] = 0.5 * s * s * mesh.nodes[i] * mesh.nodes[i];
  }
  for (int i = 1; i < n - 1; ++i) {
    const double h1 = mesh.nodes[i] - mesh.nodes[i - 1];
    const double h2 = mesh.nodes[i + 1] - mesh.nodes[i];
    gp[i] = (h1 * h1 * g[i + 1] - h2 * h2 * g[i - 1] + (h2 * h2 - h1 * h1) * g[i]) /
            (h1 * h2 * (h1 + h2));
  }
  gp[0] = (g[1] - g[0]) / (mesh.nodes[1] - mesh.nodes[0]);
  gp[n - 1] = (g[n - 1] - g[n - 2]) / (mesh.nodes[n - 1] - mesh.nodes[n - 2]);

  BandedMatrix stiff(n);
  const double drift = rate - dividend;
  for (int e = 0; e < mesh.n_elements(); ++e) {
    const int base = 2 * e;
    const double h = mesh.element_width(e);
    const double k_mid = 0.5 * (mesh.nodes[base] + mesh.nodes[base + 2]);
    double block[3][3] = {};
    for (int gq = 0; gq < 4; ++gq) {
      const double xi = kGaussX[gq];
      double nn[3], nd[3];
      shape(xi, nn);
      shape_deriv(xi, nd);
      const double k = k_mid + 0.5 * h * xi;
      double g_q = 0.0, gp_q = 0.0;
      for (int p = 0; p < 3; ++p) {
        g_q += nn[p] * g[base + p];
        gp_q += nn[p] * gp[base + p];
      }
      const double conv = gp_q + drift * k;
      for (int p = 0; p < 3; ++p)
        for (int q = 0; q < 3; ++q)
          block[p][q] += kGaussW[gq] * ((2.0 / h) * g_q * nd[p] * nd[q] + conv * nn[p] * nd[q]);
    }
    // The q V term contributes dividend times the exact element mass block.
    const double mass_scale = dividend * h / 30.0;
    for (int p = 0; p < 3; ++p)
      for (int q = 0; q < 3; ++q)
        stiff.at(base + p, base + q) += block[p][q] + mass_scale * kMass[p][q];
  }
  return stiff;
}

BandedMatrix assemble_stiffness(const StrikeMesh& mesh, const MaturityGrid& grid,
                                const PdeCoefficients& coeffs, int level) {
  if (level < 0 || level >= grid.n_levels())
    throw IndexOutOfRangeError("stiffness level outside maturity grid");
  std::vector<double> sig(mesh.n_nodes());
  for (int i = 0; i < mesh.n_nodes(); ++i) sig[i] = coeffs.sigma(level, i);
  return assemble_stiffness(mesh, sig, coeffs.rate, coeffs.dividend);
}

// ---------------------------------------------------------------------------
// Time stepping

FemWorkspace::FemWorkspace(const StrikeMesh& mesh, const MaturityGrid& grid)
    : mesh_(&mesh), grid_(&grid) {
  if (mesh.n_nodes() < 5 || mesh.n_nodes() % 2 == 0)
    throw TooFewNodesError("strike mesh needs an odd node count >= 5");
  for (int i = 1; i < mesh.n_nodes(); ++i)
    if (mesh.nodes[i] <= mesh.nodes[i - 1])
      throw ConfigError("strike nodes must be strictly increasing");
  if (grid.n_levels() < 2) throw TooFewNodesError("maturity grid needs at least two levels");
  if (std::abs(grid.times.front()) > 1e-12)
    throw ConfigError("maturity grid must start at T = 0");
  for (int i = 1; i < grid.n_levels(); ++i)
    if (grid.times[i] <= grid.times[i - 1])
      throw ConfigError("maturity levels must be strictly increasing");

  mass_ = assemble_mass(mesh);
  lhs_ = BandedMatrix(mesh.n_nodes());
  field_.assign(static_cast<std::size_t>(grid.n_levels()) * mesh.n_nodes(), 0.0);
  rhs_.assign(mesh.n_nodes(), 0.0);
}

const std::vector<double>& FemWorkspace::solve(const PdeCoefficients& coeffs) {
  const int n = mesh_->n_nodes();
  for (int i = 0; i < n; ++i) field_[i] = std::max(coeffs.spot - mesh_->nodes[i], 0.0);

  BandedMatrix stiff_prev = assemble_stiffness(*mesh_, *grid_, coeffs, 0);
  for (int level = 1; level < grid_->n_levels(); ++level) {
    BandedMatrix stiff_cur = assemble_stiffness(*mesh_, *grid_, coeffs, level);
    step_crank_nicolson(level, stiff_prev, stiff_cur, coeffs.rate);
    stiff_prev = std::move(stiff_cur);
  }
  return field_;
}

void FemWorkspace::step_crank_nicolson(int n, const BandedMatrix& stiff_prev,
                                       const BandedMatrix& stiff_cur, double rate) {
  if (n < 1 || n >= grid_->n_levels()) throw IndexOutOfRangeError("step level out of range");
  const int nn = mesh_->n_nodes();
  const double k = grid_->times[n] - grid_->times[n - 1];
  const double half_k = 0.5 * k;

  // rhs = (M - k/2 J^{n-1}) U^{n-1}, built via two band multiplies to keep
  // the matrices reusable.
  std::span<double> prev(field_.data() + static_cast<std::size_t>(n - 1) * nn, nn);
  std::vector<double>& rhs = rhs_;
  mass_.multiply(prev, rhs);
  std::vector<double> jv(nn);
  stiff_prev.multiply(prev, jv);
  for (int i = 0; i < nn; ++i) rhs[i] -= half_k * jv[i];

  lhs_.clear();
  for (int i = 0; i < nn; ++i) {
    const int lo = std::max(0, i - 2), hi = std::min(nn - 1, i + 2);
    for (int j = lo; j <= hi; ++j)
      lhs_.at(i, j) = mass_.at(i, j) + half_k * stiff_cur.at(i, j);
  }

  // Dirichlet boundaries: overwrite the two boundary rows with identity rows
  // and put the boundary values on the right-hand side; the band solve then
  // feeds them into the interior rows through the (i, 0) and (i, nn-1)
  // couplings, which is exactly the reduced system.
  const double t = grid_->times[n];
  const double left_bc = std::exp(-rate * t) * (mesh_->spot - mesh_->nodes.front());
  lhs_.at(0, 0) = 1.0;
  lhs_.at(0, 1) = 0.0;
  lhs_.at(0, 2) = 0.0;
  lhs_.at(nn - 1, nn - 1) = 1.0;
  lhs_.at(nn - 1, nn - 2) = 0.0;
  lhs_.at(nn - 1, nn - 3) = 0.0;
  rhs[0] = left_bc;
  rhs[nn - 1] = 0.0;

  lhs_.solve_in_place(rhs);
  std::copy(rhs.begin(), rhs.end(), field_.begin() + static_cast<std::size_t>(n) * nn);
}

std::span<const double> FemWorkspace::level_values(int n) const {
  if (n < 0 || n >= grid_->n_levels()) throw IndexOutOfRangeError("level out of range");
  return {field_.data() + static_cast<std::size_t>(n) * mesh_->n_nodes(),
          static_cast<std::size_t>(mesh_->n_nodes())};
}

std::vector<double> price_surface(const StrikeMesh& mesh, const MaturityGrid& grid,
                                  const PdeCoefficients& coeffs) {
  FemWorkspace ws(mesh, grid);
  return ws.solve(coeffs);
}

double extract_price(std::span<const double> field, const StrikeMesh& mesh,
                     const MaturityGrid& grid, double maturity, double strike) {
  if (field.size() != static_cast<std::size_t>(grid.n_levels()) * mesh.n_nodes())
    throw DimensionMismatchError("field size does not match mesh and grid");
  const int level = grid.level_of(maturity);
  const int e = mesh.element_of(strike);
  const double k1 = mesh.nodes[2 * e], k3 = mesh.nodes[2 * e + 2];
  const double xi = (2.0 * strike - k1 - k3) / (k3 - k1);
  double nn[3];
  shape(xi, nn);
  const double* u = field.data() + static_cast<std::size_t>(level) * mesh.n_nodes() + 2 * e;
  const double price = nn[0] * u[0] + nn[1] * u[1] + nn[2] * u[2];
  return std::max(price, 0.0);
}

void dump_solution(std::ostream& out, std::span<const double> field, const StrikeMesh& mesh,
                   const MaturityGrid& grid) {
  out << "maturity,strike,price\n";
  char buf[96];
  for (int n = 0; n < grid.n_levels(); ++n) {
    for (int i = 0; i < mesh.n_nodes(); ++i) {
      std::snprintf(buf, sizeof(buf), "%.12g,%.12g,%.12g\n", grid.times[n], mesh.nodes[i],
                    field[static_cast<std::size_t>(n) * mesh.n_nodes() + i]);
      out << buf;
    }
  }
}

}  // namespace volcal
