#pragma once

#include <functional>
#include <iosfwd>
#include <span>
#include <vector>

#include "volcal/errors.hpp"
#include "volcal/market_data.hpp"

namespace volcal {

// General banded matrix with two sub- and two super-diagonals (the profile
// produced by overlapping quadratic elements), plus two extra super-diagonal
// rows of fill for the pivoted LU. Band storage, LAPACK layout: entry (i, j)
// with |i - j| <= 2 lives at band[kl + ku + i - j][j]; rows 0..kl-1 hold
// pivoting fill.
class BandedMatrix {
 public:
  BandedMatrix() = default;
  explicit BandedMatrix(int n);

  int size() const { return n_; }
  double at(int i, int j) const;
  double& at(int i, int j);
  void clear();

  // In-place LU with partial pivoting, then forward/back substitution.
  // Throws SingularSystemError on an exactly singular pivot.
  void solve_in_place(std::span<double> rhs);

  // y = A x for the unfactored matrix.
  void multiply(std::span<const double> x, std::span<double> y) const;

  BandedMatrix& operator=(const BandedMatrix&) = default;
  BandedMatrix(const BandedMatrix&) = default;

 private:
  static constexpr int kl_ = 2;
  static constexpr int ku_ = 2;
  int n_ = 0;
  bool factored_ = false;
  std::vector<double> band_;  // (2*kl+ku+1) x n, row-major
  std::vector<int> pivots_;
};

// Strike mesh for quadratic elements: element e spans
// [nodes[2e], nodes[2e+2]] with the interior node at the midpoint.
struct StrikeMesh {
  std::vector<double> nodes;  // odd count, strictly increasing
  double spot = 0.0;

  int n_nodes() const { return static_cast<int>(nodes.size()); }
  int n_elements() const { return (n_nodes() - 1) / 2; }
  double element_width(int e) const { return nodes[2 * e + 2] - nodes[2 * e]; }
  // Index of the element containing K; throws StrikeOutOfDomainError.
  int element_of(double strike) const;
};

struct MaturityGrid {
  std::vector<double> times;  // times[0] = 0, strictly increasing

  int n_levels() const { return static_cast<int>(times.size()); }
  // Level with |times[n] - t| <= 1e-10; throws MaturityNotOnGridError.
  int level_of(double t) const;
};

// Mesh construction knobs. Strike nodes come from a stretched map whose node
// density is `stretch` times higher across [band_lo, band_hi] (defaulting to
// a band around the spot) than near the domain edges, decaying smoothly over
// `shoulder_frac * spot`; stretch = 1 gives uniform spacing. Time levels
// follow T_n = t_max (n/N)^time_grading, unioned with the quote maturities;
// time_grading = 1 gives uniform spacing.
struct MeshConfig {
  int strike_nodes = 51;  // odd, >= 5
  int time_levels = 51;   // counts T = 0
  double stretch = 4.0;
  double band_lo = 0.0;  // <= 0 means 0.78 * spot
  double band_hi = 0.0;  // <= 0 means 1.26 * spot
  double shoulder_frac = 0.10;
  double time_grading = 2.0;
};

enum class MeshLevel { coarse, fine };

// 11x11 / 51x51 presets used by the two sampler fidelities.
MeshConfig mesh_config(MeshLevel level);

std::pair<StrikeMesh, MaturityGrid> build_mesh(const MarketParams& params,
                                               const MeshConfig& config,
                                               std::span<const double> quote_maturities);

// Coefficients of the forward PDE
//   dV/dT - 1/2 sigma^2(K,T) K^2 d2V/dK2 + (r - q) K dV/dK + q V = 0.
// sigma is sampled at (time level, strike node) index pairs and must be
// strictly positive wherever evaluated.
struct PdeCoefficients {
  double rate = 0.0;
  double dividend = 0.0;
  double spot = 0.0;
  std::function<double(int level, int node)> sigma;
};

// Global mass matrix: element blocks (h_e/30) [[4,2,-1],[2,16,2],[-1,2,4]]
// assembled over shared nodes.
BandedMatrix assemble_mass(const StrikeMesh& mesh);

// Global stiffness at one time level given sigma at the mesh nodes.
// Element integrand, 4-point Gauss-Legendre on xi in [-1,1]:
//   (2/h) g(K) Np' Nq' + (g'(K) + (r - q) K) Np Nq' + q (h/2) Np Nq
// with g = 1/2 sigma^2 K^2; g' comes from central differences of the nodal
// g values (one-sided at the domain edges) interpolated quadratically.
BandedMatrix assemble_stiffness(const StrikeMesh& mesh, std::span<const double> sigma_nodes,
                                double rate, double dividend);
// Same, pulling sigma from the coefficients callable at one grid level.
BandedMatrix assemble_stiffness(const StrikeMesh& mesh, const MaturityGrid& grid,
                                const PdeCoefficients& coeffs, int level);

// Scratch space reused across solves (single-threaded; use one per thread).
class FemWorkspace {
 public:
  FemWorkspace(const StrikeMesh& mesh, const MaturityGrid& grid);

  const StrikeMesh& mesh() const { return *mesh_; }
  const MaturityGrid& grid() const { return *grid_; }

  // Crank-Nicolson sweep over all levels. Returns the solution field,
  // row-major (level, node), valid until the next solve. The initial level
  // is the payoff max(S0 - K, 0); boundaries are Dirichlet with
  // V(K_min, T) = e^{-rT} (S0 - K_min) and V(K_max, T) = 0.
  const std::vector<double>& solve(const PdeCoefficients& coeffs);

  // One step of (M + k/2 J^n) U^n = (M - k/2 J^{n-1}) U^{n-1} + b where b
  // carries the boundary columns of both sides. Exposed for testing;
  // requires stiffness matrices for levels n-1 and n.
  void step_crank_nicolson(int n, const BandedMatrix& stiff_prev, const BandedMatrix& stiff_cur,
                           double rate);

  std::span<const double> level_values(int n) const;

 private:
  const StrikeMesh* mesh_;
  const MaturityGrid* grid_;
  BandedMatrix mass_;
  BandedMatrix lhs_;
  std::vector<double> field_;  // n_levels x n_nodes
  std::vector<double> rhs_;
  std::vector<double> sigma_cur_, sigma_prev_;
};

// One-shot convenience around FemWorkspace::solve.
std::vector<double> price_surface(const StrikeMesh& mesh, const MaturityGrid& grid,
                                  const PdeCoefficients& coeffs);

// Evaluates the quadratic element interpolant at (T, K). T must coincide
// with a grid level. Negative interpolated values are floored at zero here
// and nowhere else.
double extract_price(std::span<const double> field, const StrikeMesh& mesh,
                     const MaturityGrid& grid, double maturity, double strike);

// Debug dump of the whole field as CSV rows "T,K,price".
void dump_solution(std::ostream& out, std::span<const double> field, const StrikeMesh& mesh,
                   const MaturityGrid& grid);

}  // namespace volcal
