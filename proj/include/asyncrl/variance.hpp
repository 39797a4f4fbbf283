#pragma once
// SPDX-License-Identifier: Apache-2.0

/**
 * Exact variance accounting for the two importance-weight estimators.
 *
 * For discrete p, q with full support:
 *   var_std = sum(p_i^2 / q_i) - 1            variance of w = p/q under q
 *   var_new = (I2 - B) / A                    variance of w = p/E_q[q] under q
 * with A = (sum q_i^2)^2, B = (sum p_i q_i)^2, I1 = sum p_i^2/q_i,
 * I2 = sum p_i^2 q_i. The difference Delta = var_std - var_new satisfies
 * Delta >= exp(KL(p||q)) - (n^2 + 1), so var_new wins strictly whenever
 * KL > log(n^2 + 1).
 *
 * The Gaussian sweep (unit variance, means a and b) uses closed forms:
 *   var_std = exp((a-b)^2) - 1
 *   int q^2   = 1 / (2 sqrt(pi))
 *   int p q   = exp(-(a-b)^2/4) / (2 sqrt(pi))
 *   int p^2 q = exp(-(a-b)^2/3) / (2 sqrt(3) pi)
 * The continuous case reports raw variances only; the (n^2+1) constant is
 * discrete-specific.
 */

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "asyncrl/errors.hpp"
#include "asyncrl/rng.hpp"

namespace asyncrl::variance {

// ============================================================================
// DiscreteDist
// ============================================================================

/// Strictly positive probability vector summing to 1.
struct DiscreteDist {
  std::vector<double> probs;

  explicit DiscreteDist(std::vector<double> p) : probs(std::move(p)) { validate(); }

  void validate() const {
    if (probs.size() < 2) throw DomainError("distribution needs n >= 2 outcomes");
    double sum = 0.0;
    for (double v : probs) {
      if (!(v > 0.0) || !std::isfinite(v)) throw DomainError("probabilities must be > 0");
      sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-12) {
      throw DomainError("probabilities must sum to 1 (got " + std::to_string(sum) + ")");
    }
  }

  std::size_t size() const { return probs.size(); }

  static DiscreteDist bernoulli(double a) {
    if (!(a > 0.0 && a < 1.0)) throw DomainError("Bernoulli parameter must lie in (0, 1)");
    return DiscreteDist({a, 1.0 - a});
  }

  /// Symmetric Dirichlet(1) draw (normalized exponentials).
  static DiscreteDist dirichlet(std::size_t n, Rng& rng) {
    std::vector<double> p(n);
    double sum = 0.0;
    for (double& v : p) {
      v = rng.exponential(1.0);
      v = std::max(v, 1e-300);
      sum += v;
    }
    for (double& v : p) v /= sum;
    // Renormalize exactly enough for the strict validator.
    double s2 = 0.0;
    for (double v : p) s2 += v;
    for (double& v : p) v /= s2;
    return DiscreteDist(std::move(p));
  }
};

namespace detail {
inline void check_pair(const DiscreteDist& p, const DiscreteDist& q) {
  if (p.size() != q.size()) throw DomainError("distributions must have equal length");
}
}  // namespace detail

// ============================================================================
// Exact variances and divergences
// ============================================================================

/// Variance of the standard weight p/q under sampling from q.
inline double var_std(const DiscreteDist& p, const DiscreteDist& q) {
  detail::check_pair(p, q);
  double i1 = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) i1 += p.probs[i] * p.probs[i] / q.probs[i];
  return i1 - 1.0;
}

/// Variance of the group-expectation weight p/E_q[q] under sampling from q.
inline double var_new(const DiscreteDist& p, const DiscreteDist& q) {
  detail::check_pair(p, q);
  double sum_q2 = 0.0, sum_pq = 0.0, i2 = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    sum_q2 += q.probs[i] * q.probs[i];
    sum_pq += p.probs[i] * q.probs[i];
    i2 += p.probs[i] * p.probs[i] * q.probs[i];
  }
  return (i2 - sum_pq * sum_pq) / (sum_q2 * sum_q2);
}

inline double kl_divergence(const DiscreteDist& p, const DiscreteDist& q) {
  detail::check_pair(p, q);
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    kl += p.probs[i] * std::log(p.probs[i] / q.probs[i]);
  }
  return std::max(kl, 0.0);
}

// ============================================================================
// AppendixQuantities
// ============================================================================

struct AppendixQuantities {
  double A = 0.0;        // (sum q^2)^2
  double B = 0.0;        // (sum p q)^2
  double I1 = 0.0;       // sum p^2/q
  double I2 = 0.0;       // sum p^2 q
  double var_std = 0.0;
  double var_new = 0.0;
  double kl = 0.0;
  double chi2 = 0.0;     // I1 - 1
  double delta = 0.0;    // var_std - var_new
  double bound = 0.0;    // exp(kl) - (n^2 + 1)
};

/**
 * All Appendix quantities with the range and bound checks applied:
 * A in [1/n^2, 1], B in [0, 1], I1 >= 1, I2 in (0, 1], and
 * delta >= exp(kl) - (n^2 + 1). A violation is an internal-consistency
 * failure, not a caller error.
 */
inline AppendixQuantities appendix_quantities(const DiscreteDist& p, const DiscreteDist& q) {
  detail::check_pair(p, q);
  const double n = static_cast<double>(p.size());
  AppendixQuantities out;
  double sum_q2 = 0.0, sum_pq = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    sum_q2 += q.probs[i] * q.probs[i];
    sum_pq += p.probs[i] * q.probs[i];
    out.I1 += p.probs[i] * p.probs[i] / q.probs[i];
    out.I2 += p.probs[i] * p.probs[i] * q.probs[i];
  }
  out.A = sum_q2 * sum_q2;
  out.B = sum_pq * sum_pq;
  out.var_std = out.I1 - 1.0;
  out.var_new = (out.I2 - out.B) / out.A;
  out.kl = kl_divergence(p, q);
  out.chi2 = out.I1 - 1.0;
  out.delta = out.var_std - out.var_new;
  out.bound = std::exp(out.kl) - (n * n + 1.0);

  constexpr double slack = 1e-9;
  if (out.A < 1.0 / (n * n) - slack || out.A > 1.0 + slack) {
    throw std::logic_error("A outside [1/n^2, 1]");
  }
  if (out.B < -slack || out.B > 1.0 + slack) throw std::logic_error("B outside [0, 1]");
  if (out.I1 < 1.0 - slack) throw std::logic_error("I1 below 1");
  if (out.I2 <= 0.0 || out.I2 > 1.0 + slack) throw std::logic_error("I2 outside (0, 1]");
  if (out.delta < out.bound - slack * std::max(1.0, std::abs(out.bound))) {
    throw std::logic_error("variance-difference bound violated");
  }
  return out;
}

// ============================================================================
// Sweeps
// ============================================================================

struct SweepRow {
  double a = 0.0;
  double b = 0.0;
  double kl = 0.0;
  double var_std = 0.0;
  double var_new = 0.0;
  double delta = 0.0;
  bool region_flag = false;  // true where var_new > var_std
};

/// Bernoulli(a) vs Bernoulli(b) over an interior grid of (a, b).
/// grid points per axis at a_k = k/(grid+1), k = 1..grid.
inline std::vector<SweepRow> bernoulli_sweep(int grid) {
  if (grid < 2) throw DomainError("grid needs >= 2 points per axis");
  std::vector<SweepRow> rows;
  rows.reserve(static_cast<std::size_t>(grid) * grid);
  for (int i = 1; i <= grid; ++i) {
    for (int j = 1; j <= grid; ++j) {
      const double a = static_cast<double>(i) / (grid + 1);
      const double b = static_cast<double>(j) / (grid + 1);
      const auto p = DiscreteDist::bernoulli(a);
      const auto q = DiscreteDist::bernoulli(b);
      SweepRow row;
      row.a = a;
      row.b = b;
      row.kl = kl_divergence(p, q);
      row.var_std = var_std(p, q);
      row.var_new = var_new(p, q);
      row.delta = row.var_std - row.var_new;
      row.region_flag = row.var_new > row.var_std;
      rows.push_back(row);
    }
  }
  return rows;
}

namespace gauss {
// Closed-form overlap integrals for unit-variance Gaussians with means a, b.
inline double int_q2() { return 1.0 / (2.0 * std::sqrt(M_PI)); }
inline double int_pq(double a, double b) {
  const double d = a - b;
  return std::exp(-d * d / 4.0) / (2.0 * std::sqrt(M_PI));
}
inline double int_p2q(double a, double b) {
  const double d = a - b;
  return std::exp(-d * d / 3.0) / (2.0 * std::sqrt(3.0) * M_PI);
}
inline double density(double x, double mean) {
  const double d = x - mean;
  return std::exp(-d * d / 2.0) / std::sqrt(2.0 * M_PI);
}

/// Adaptive Simpson quadrature; the cross-check oracle for the closed forms.
template <typename F>
double adaptive_simpson(F f, double lo, double hi, double tol = 1e-12, int depth = 24) {
  auto simpson = [&](double l, double h) {
    const double m = 0.5 * (l + h);
    return (h - l) / 6.0 * (f(l) + 4.0 * f(m) + f(h));
  };
  struct Rec {
    double lo, hi, whole;
    int depth;
  };
  const double whole = simpson(lo, hi);
  std::vector<Rec> stack{{lo, hi, whole, depth}};
  double total = 0.0;
  while (!stack.empty()) {
    Rec r = stack.back();
    stack.pop_back();
    const double mid = 0.5 * (r.lo + r.hi);
    const double left = simpson(r.lo, mid);
    const double right = simpson(mid, r.hi);
    if (r.depth <= 0 || std::abs(left + right - r.whole) < 15.0 * tol) {
      total += left + right + (left + right - r.whole) / 15.0;
    } else {
      stack.push_back({r.lo, mid, left, r.depth - 1});
      stack.push_back({mid, r.hi, right, r.depth - 1});
    }
  }
  return total;
}
}  // namespace gauss

/// Gaussian sweep over mean pairs; var_std from the closed form
/// exp((a-b)^2) - 1, var_new from closed-form overlap integrals.
/// |a - b| is capped at 6 to keep exp((a-b)^2) in range.
inline SweepRow gaussian_point(double a, double b) {
  if (std::abs(a - b) > 6.0) throw DomainError("|a - b| must be <= 6");
  SweepRow row;
  row.a = a;
  row.b = b;
  const double d = a - b;
  row.kl = d * d / 2.0;
  row.var_std = std::exp(d * d) - 1.0;
  const double q2 = gauss::int_q2();
  const double pq = gauss::int_pq(a, b);
  const double p2q = gauss::int_p2q(a, b);
  row.var_new = (p2q - pq * pq) / (q2 * q2);
  row.delta = row.var_std - row.var_new;
  row.region_flag = row.var_new > row.var_std;
  return row;
}

inline std::vector<SweepRow> gaussian_sweep(int grid, double lo = -2.0, double hi = 2.0) {
  if (grid < 2) throw DomainError("grid needs >= 2 points per axis");
  if (!(lo < hi)) throw DomainError("grid range must be non-empty");
  std::vector<SweepRow> rows;
  rows.reserve(static_cast<std::size_t>(grid) * grid);
  for (int i = 0; i < grid; ++i) {
    for (int j = 0; j < grid; ++j) {
      const double a = lo + (hi - lo) * i / (grid - 1);
      const double b = lo + (hi - lo) * j / (grid - 1);
      rows.push_back(gaussian_point(a, b));
    }
  }
  return rows;
}

// ============================================================================
// Monte Carlo cross-checks
// ============================================================================

struct McMoments {
  double mean = 0.0;
  double variance = 0.0;        // sample variance of the weight
  double se_mean = 0.0;         // standard error of the mean
  std::int64_t draws = 0;
};

/// Sample moments of weight(i) over draws i ~ q.
template <typename WeightFn>
McMoments mc_weight_moments(const DiscreteDist& q, WeightFn weight, std::int64_t draws,
                            Rng& rng) {
  if (draws < 2) throw DomainError("need >= 2 draws");
  double sum = 0.0, sum_sq = 0.0;
  for (std::int64_t k = 0; k < draws; ++k) {
    const int i = rng.categorical(q.probs);
    const double w = weight(i);
    sum += w;
    sum_sq += w * w;
  }
  McMoments m;
  m.draws = draws;
  m.mean = sum / static_cast<double>(draws);
  m.variance = std::max(0.0, sum_sq / static_cast<double>(draws) - m.mean * m.mean);
  m.se_mean = std::sqrt(m.variance / static_cast<double>(draws));
  return m;
}

}  // namespace asyncrl::variance
