#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "volcal/errors.hpp"

namespace volcal {

// Gaussian reference measure N(center, sd^2) on one axis of the rescaled
// domain. The Karhunen-Loeve eigenproblem for the squared-exponential kernel
// exp(-b (x-x')^2) has closed-form eigenpairs under this measure.
struct GaussianMeasure {
  double center = 0.0;
  double sd = 0.68;
};

// Physicists' Hermite polynomial H_k(x) via the three-term recurrence
// H_{k+1} = 2 x H_k - 2 k H_{k-1}. Orders above 64 are rejected, the
// closed-form basis never needs them and the recurrence loses accuracy.
double hermite_h(int k, double x);

// Standard Gauss-Hermite rule: nodes y_i and weights w_i for integrals
// against exp(-y^2). Computed once per node count and cached.
struct GaussHermiteRule {
  std::vector<double> nodes;
  std::vector<double> weights;
};
const GaussHermiteRule& gauss_hermite(int n);

// One 1D eigenpair of the squared-exponential kernel under a Gaussian
// measure. With a = 1/(4 sd^2), b = 1/(2 l^2), c = sqrt(a^2 + 2ab),
// A = a + b + c, B = b/A:
//   lambda_k = sqrt(2a/A) B^k
//   phi_k(x) = h_k exp(-(c-a)(x-m)^2) H_k(sqrt(2c)(x-m))
// normalized so that the phi_k are orthonormal in L2(measure).
struct KlEigen1d {
  int order = 0;
  double lengthscale = 0.0;
  double a = 0.0, b = 0.0, c = 0.0, big_a = 0.0, ratio_b = 0.0;
  double lambda = 0.0;
  double norm = 0.0;  // h_k
  GaussianMeasure measure;

  double eval(double x) const;
};

// Builds the eigenpair for one order. The analytic normalization constant
// h_k = (2^k k!)^{-1/2} (c/a)^{1/4} is verified against 200-node
// Gauss-Hermite quadrature (|<phi_k, phi_k> - 1| <= 1e-8); if verification
// fails the constant is replaced by the quadrature-based one.
KlEigen1d kl_eigenpair_1d(int order, double lengthscale, const GaussianMeasure& measure);

// One term of the 2D tensor basis: lambda = lambda_i(t-axis) * lambda_j(k-axis).
struct KlTerm2d {
  int i = 0;  // order along the maturity axis
  int j = 0;  // order along the strike axis
  double lambda = 0.0;
};

// Full tensor-product basis over the unit square, sorted by descending
// lambda (ties broken lexicographically on (i, j)). n_kl marks the active
// truncation for surface evaluation; total_energy is the analytic value of
// the full (untruncated) eigenvalue sum, a product of geometric series.
struct KlBasis {
  double l_t = 0.0;  // lengthscale along maturity
  double l_k = 0.0;  // lengthscale along strike
  GaussianMeasure measure_t;
  GaussianMeasure measure_k;
  int max_per_dim = 0;
  std::vector<KlEigen1d> eig_t;
  std::vector<KlEigen1d> eig_k;
  std::vector<KlTerm2d> terms;  // size max_per_dim^2, sorted
  int n_kl = 0;
  double total_energy = 0.0;
  double mean_log_vol = 0.0;  // mu_Y
  double prior_sd = 1.0;      // sigma_Y
};

KlBasis build_tensor_basis(double l_t, double l_k, const GaussianMeasure& measure_t,
                           const GaussianMeasure& measure_k, int max_per_dim,
                           double mean_log_vol, double prior_sd);

// Fraction of the analytic total eigenvalue mass captured by the first n
// terms of the sorted basis.
double energy_ratio(const KlBasis& basis, int n);

// Smallest n with energy_ratio(basis, n) >= threshold. Throws
// ThresholdUnreachableError when even the full tabulated set falls short.
int select_truncation(const KlBasis& basis, double threshold);

// Log-volatility field Y(u, v) = mu_Y + sigma_Y sum_k theta_k sqrt(lambda_k)
// phi_k(u, v) at arbitrary points. theta must have exactly basis.n_kl entries.
struct Point2d {
  double u = 0.0;  // maturity coordinate
  double v = 0.0;  // strike coordinate
};
std::vector<double> eval_log_vol(const KlBasis& basis, std::span<const double> theta,
                                 std::span<const Point2d> points);

// Tensor-grid fast path: returns exp(Y) on the grid {us} x {vs}, row-major
// with u as the slow index. Factorizes the 1D eigenfunction tables so the
// cost is O((|us| + |vs|) max_per_dim + |us| |vs| n_kl).
std::vector<double> eval_vol_grid(const KlBasis& basis, std::span<const double> theta,
                                  std::span<const double> us, std::span<const double> vs);

// Draws theta ~ N(0, I_{n_kl}) with a dedicated engine seeded by seed and
// returns the volatility field exp(Y) on the given grid. Same seed, same
// bits.
struct SurfaceSample {
  std::vector<double> theta;
  std::vector<double> vol;  // |us| x |vs| row-major
};
SurfaceSample sample_surface(const KlBasis& basis, std::uint64_t seed,
                             std::span<const double> us, std::span<const double> vs);

}  // namespace volcal
