#include "volcal/kl_prior.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <random>
#include <sstream>

#include <Eigen/Dense>

namespace volcal {

namespace {
constexpr int kMaxHermiteOrder = 64;
constexpr double kSqrtPi = 1.7724538509055160273;
}  // namespace

double hermite_h(int k, double x) {
  if (k < 0 || k > kMaxHermiteOrder) {
    std::ostringstream msg;
    msg << "Hermite order " << k << " outside [0, " << kMaxHermiteOrder << "]";
    throw OrderTooLargeError(msg.str());
  }
  if (k == 0) return 1.0;
  double prev = 1.0;
  double cur = 2.0 * x;
  for (int j = 1; j < k; ++j) {
    double next = 2.0 * x * cur - 2.0 * j * prev;
    prev = cur;
    cur = next;
  }
  return cur;
}

// Golub-Welsch: nodes are the eigenvalues of the Jacobi matrix of the
// Hermite recurrence, weights come from the first eigenvector components.
const GaussHermiteRule& gauss_hermite(int n) {
  if (n < 1) throw OrderTooLargeError("Gauss-Hermite rule needs at least one node");
  static std::map<int, GaussHermiteRule> cache;
  static std::mutex mu;
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;

  Eigen::MatrixXd jacobi = Eigen::MatrixXd::Zero(n, n);
  for (int i = 1; i < n; ++i) {
    double beta = std::sqrt(0.5 * i);
    jacobi(i, i - 1) = beta;
    jacobi(i - 1, i) = beta;
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(jacobi);

  GaussHermiteRule rule;
  rule.nodes.resize(n);
  rule.weights.resize(n);
  for (int i = 0; i < n; ++i) {
    rule.nodes[i] = es.eigenvalues()(i);
    double v0 = es.eigenvectors()(0, i);
    rule.weights[i] = kSqrtPi * v0 * v0;
  }
  return cache.emplace(n, std::move(rule)).first->second;
}

double KlEigen1d::eval(double x) const {
  const double d = x - measure.center;
  return norm * std::exp(-(c - a) * d * d) * hermite_h(order, std::sqrt(2.0 * c) * d);
}

KlEigen1d kl_eigenpair_1d(int order, double lengthscale, const GaussianMeasure& measure) {
  if (order < 0 || order > kMaxHermiteOrder) {
    std::ostringstream msg;
    msg << "eigenpair order " << order << " outside [0, " << kMaxHermiteOrder << "]";
    throw OrderTooLargeError(msg.str());
  }
  if (lengthscale <= 0.0 || measure.sd <= 0.0)
    throw ConfigError("lengthscale and measure sd must be positive");

  KlEigen1d e;
  e.order = order;
  e.lengthscale = lengthscale;
  e.measure = measure;
  e.a = 1.0 / (4.0 * measure.sd * measure.sd);
  e.b = 1.0 / (2.0 * lengthscale * lengthscale);
  e.c = std::sqrt(e.a * e.a + 2.0 * e.a * e.b);
  e.big_a = e.a + e.b + e.c;
  e.ratio_b = e.b / e.big_a;
  e.lambda = std::sqrt(2.0 * e.a / e.big_a) * std::pow(e.ratio_b, order);
  // h_k = (2^k k!)^{-1/2} (c/a)^{1/4}, via logs to stay finite at high order.
  e.norm = std::exp(-0.5 * (order * std::log(2.0) + std::lgamma(order + 1.0))) *
           std::pow(e.c / e.a, 0.25);

  // The closed-form constant should make <phi, phi>_mu = 1. Check it with a
  // 200-node rule; if the check fails (it should not), fall back to the
  // quadrature normalization so downstream orthonormality still holds.
  const GaussHermiteRule& rule = gauss_hermite(200);
  double gram = 0.0;
  for (std::size_t i = 0; i < rule.nodes.size(); ++i) {
    double x = measure.center + std::sqrt(2.0) * measure.sd * rule.nodes[i];
    double phi = e.eval(x);
    gram += rule.weights[i] * phi * phi;
  }
  gram /= kSqrtPi;
  if (std::abs(gram - 1.0) > 1e-8) e.norm /= std::sqrt(gram);
  return e;
}

KlBasis build_tensor_basis(double l_t, double l_k, const GaussianMeasure& measure_t,
                           const GaussianMeasure& measure_k, int max_per_dim,
                           double mean_log_vol, double prior_sd) {
  if (max_per_dim < 1 || max_per_dim > kMaxHermiteOrder + 1)
    throw OrderTooLargeError("max_per_dim must be in [1, 65]");

  KlBasis basis;
  basis.l_t = l_t;
  basis.l_k = l_k;
  basis.measure_t = measure_t;
  basis.measure_k = measure_k;
  basis.max_per_dim = max_per_dim;
  basis.mean_log_vol = mean_log_vol;
  basis.prior_sd = prior_sd;

  basis.eig_t.reserve(max_per_dim);
  basis.eig_k.reserve(max_per_dim);
  for (int k = 0; k < max_per_dim; ++k) {
    basis.eig_t.push_back(kl_eigenpair_1d(k, l_t, measure_t));
    basis.eig_k.push_back(kl_eigenpair_1d(k, l_k, measure_k));
  }

  basis.terms.reserve(static_cast<std::size_t>(max_per_dim) * max_per_dim);
  for (int i = 0; i < max_per_dim; ++i)
    for (int j = 0; j < max_per_dim; ++j)
      basis.terms.push_back({i, j, basis.eig_t[i].lambda * basis.eig_k[j].lambda});
  std::sort(basis.terms.begin(), basis.terms.end(), [](const KlTerm2d& x, const KlTerm2d& y) {
    if (x.lambda != y.lambda) return x.lambda > y.lambda;
    if (x.i != y.i) return x.i < y.i;
    return x.j < y.j;
  });

  // Each 1D family sums to sqrt(2a/A) / (1 - B) over all orders; the 2D
  // total is the product. This is the denominator of the energy ratio.
  auto axis_total = [](const KlEigen1d& e0) {
    return std::sqrt(2.0 * e0.a / e0.big_a) / (1.0 - e0.ratio_b);
  };
  basis.total_energy = axis_total(basis.eig_t[0]) * axis_total(basis.eig_k[0]);
  return basis;
}

double energy_ratio(const KlBasis& basis, int n) {
  if (n < 1 || n > static_cast<int>(basis.terms.size())) {
    std::ostringstream msg;
    msg << "energy_ratio n = " << n << " outside [1, " << basis.terms.size() << "]";
    throw IndexOutOfRangeError(msg.str());
  }
  double sum = 0.0;
  for (int k = 0; k < n; ++k) sum += basis.terms[k].lambda;
  return sum / basis.total_energy;
}

int select_truncation(const KlBasis& basis, double threshold) {
  if (threshold <= 0.0 || threshold >= 1.0)
    throw ConfigError("energy threshold must lie in (0, 1)");
  double sum = 0.0;
  for (std::size_t k = 0; k < basis.terms.size(); ++k) {
    sum += basis.terms[k].lambda;
    if (sum / basis.total_energy >= threshold) return static_cast<int>(k) + 1;
  }
  std::ostringstream msg;
  msg << "energy threshold " << threshold << " not reached with " << basis.max_per_dim
      << " orders per axis (got " << sum / basis.total_energy << "); enlarge max_per_dim";
  throw ThresholdUnreachableError(msg.str());
}

std::vector<double> eval_log_vol(const KlBasis& basis, std::span<const double> theta,
                                 std::span<const Point2d> points) {
  if (static_cast<int>(theta.size()) != basis.n_kl) {
    std::ostringstream msg;
    msg << "theta has " << theta.size() << " entries, basis truncation is " << basis.n_kl;
    throw DimensionMismatchError(msg.str());
  }
  std::vector<double> out(points.size(), basis.mean_log_vol);
  for (int k = 0; k < basis.n_kl; ++k) {
    const KlTerm2d& term = basis.terms[k];
    const double coef = basis.prior_sd * theta[k] * std::sqrt(term.lambda);
    if (coef == 0.0) continue;
    for (std::size_t p = 0; p < points.size(); ++p)
      out[p] += coef * basis.eig_t[term.i].eval(points[p].u) * basis.eig_k[term.j].eval(points[p].v);
  }
  return out;
}

std::vector<double> eval_vol_grid(const KlBasis& basis, std::span<const double> theta,
                                  std::span<const double> us, std::span<const double> vs) {
  if (static_cast<int>(theta.size()) != basis.n_kl) {
    std::ostringstream msg;
    msg << "theta has " << theta.size() << " entries, basis truncation is " << basis.n_kl;
    throw DimensionMismatchError(msg.str());
  }
  const std::size_t nu = us.size(), nv = vs.size();

  // Tabulate the 1D factors once per axis; each grid point then costs n_kl
  // multiply-adds instead of two eigenfunction evaluations per term.
  std::vector<double> tab_t(static_cast<std::size_t>(basis.max_per_dim) * nu);
  std::vector<double> tab_k(static_cast<std::size_t>(basis.max_per_dim) * nv);
  for (int i = 0; i < basis.max_per_dim; ++i) {
    for (std::size_t p = 0; p < nu; ++p) tab_t[i * nu + p] = basis.eig_t[i].eval(us[p]);
    for (std::size_t p = 0; p < nv; ++p) tab_k[i * nv + p] = basis.eig_k[i].eval(vs[p]);
  }
  std::vector<double> coef(basis.n_kl);
  for (int k = 0; k < basis.n_kl; ++k)
    coef[k] = basis.prior_sd * theta[k] * std::sqrt(basis.terms[k].lambda);

  std::vector<double> out(nu * nv);
  for (std::size_t p = 0; p < nu; ++p) {
    for (std::size_t q = 0; q < nv; ++q) {
      double y = basis.mean_log_vol;
      for (int k = 0; k < basis.n_kl; ++k)
        y += coef[k] * tab_t[basis.terms[k].i * nu + p] * tab_k[basis.terms[k].j * nv + q];
      out[p * nv + q] = std::exp(y);
    }
  }
  return out;
}

SurfaceSample sample_surface(const KlBasis& basis, std::uint64_t seed, std::span<const double> us,
                             std::span<const double> vs) {
  std::mt19937_64 engine(seed);
  std::normal_distribution<double> normal;
  SurfaceSample sample;
  sample.theta.resize(basis.n_kl);
  for (double& t : sample.theta) t = normal(engine);
  sample.vol = eval_vol_grid(basis, sample.theta, us, vs);
  return sample;
}

}  // namespace volcal
