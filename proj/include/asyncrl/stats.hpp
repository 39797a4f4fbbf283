#pragma once
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <span>
#include <string>

#include "asyncrl/errors.hpp"
#include "asyncrl/rng.hpp"

namespace asyncrl::stats {

struct CorrelationReport {
  std::string x_name;
  std::string y_name;
  double pearson_r = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  std::size_t n = 0;
  bool degenerate = false;  // constant input: r undefined, no value fabricated
};

inline bool is_constant(std::span<const double> xs) {
  for (double x : xs) {
    if (x != xs.front()) return false;
  }
  return true;
}

/**
 * Sample Pearson correlation with a Fisher-z confidence interval at level
 * 1 - alpha. Throws DegenerateInputError on constant series; callers that
 * want a flagged report instead use pearson_ci_report.
 */
inline CorrelationReport pearson_ci(std::span<const double> x, std::span<const double> y,
                                    double alpha = 0.05, const std::string& x_name = "x",
                                    const std::string& y_name = "y") {
  if (x.size() != y.size()) throw DomainError("series lengths differ");
  if (x.size() < 4) throw DomainError("need >= 4 paired observations");
  if (!(alpha > 0.0 && alpha < 1.0)) throw DomainError("alpha must lie in (0, 1)");
  if (is_constant(x) || is_constant(y)) {
    throw DegenerateInputError("constant series: correlation undefined");
  }

  const std::size_t n = x.size();
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  CorrelationReport rep;
  rep.x_name = x_name;
  rep.y_name = y_name;
  rep.n = n;
  rep.pearson_r = sxy / std::sqrt(sxx * syy);
  rep.pearson_r = std::clamp(rep.pearson_r, -1.0, 1.0);

  // Fisher z interval; degenerate at |r| = 1 where z diverges.
  const double z = std::atanh(std::clamp(rep.pearson_r, -1.0 + 1e-15, 1.0 - 1e-15));
  const double se = 1.0 / std::sqrt(static_cast<double>(n) - 3.0);
  const double zc = inv_normal_cdf(1.0 - alpha / 2.0);
  rep.ci_low = std::tanh(z - zc * se);
  rep.ci_high = std::tanh(z + zc * se);
  return rep;
}

/// Like pearson_ci but reports degeneracy in the result instead of throwing.
inline CorrelationReport pearson_ci_report(std::span<const double> x, std::span<const double> y,
                                           double alpha = 0.05, const std::string& x_name = "x",
                                           const std::string& y_name = "y") {
  if (x.size() == y.size() && x.size() >= 4 && (is_constant(x) || is_constant(y))) {
    CorrelationReport rep;
    rep.x_name = x_name;
    rep.y_name = y_name;
    rep.n = x.size();
    rep.degenerate = true;
    return rep;
  }
  return pearson_ci(x, y, alpha, x_name, y_name);
}

inline double mean(std::span<const double> xs) {
  if (xs.empty()) throw DomainError("mean of empty series");
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

inline double median(std::vector<double> xs) {
  if (xs.empty()) throw DomainError("median of empty series");
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  return n % 2 == 1 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

}  // namespace asyncrl::stats
