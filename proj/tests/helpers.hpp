#pragma once

// Test-only oracles, independent of the library implementation paths they
// check: composite quadrature, distribution tests and small-sample utilities.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include <boost/math/special_functions/gamma.hpp>

#include "ddpf/rng.hpp"
#include "ddpf/types.hpp"

namespace oracle {

// adaptive Simpson on [a, b]
inline double simpson(const std::function<double(double)>& f, double a, double b,
                      double tol = 1e-10, int depth = 24) {
  std::function<double(double, double, double, double, double, double, int)> rec =
      [&](double lo, double hi, double flo, double fmid, double fhi, double whole,
          int d) -> double {
    double mid = 0.5 * (lo + hi);
    double lm = 0.5 * (lo + mid), rm = 0.5 * (mid + hi);
    double flm = f(lm), frm = f(rm);
    double left = (mid - lo) / 6.0 * (flo + 4.0 * flm + fmid);
    double right = (hi - mid) / 6.0 * (fmid + 4.0 * frm + fhi);
    if (d <= 0 || std::abs(left + right - whole) < 15.0 * tol)
      return left + right + (left + right - whole) / 15.0;
    return rec(lo, mid, flo, flm, fmid, left, d - 1) +
           rec(mid, hi, fmid, frm, fhi, right, d - 1);
  };
  double mid = 0.5 * (a + b);
  double fa = f(a), fm = f(mid), fb = f(b);
  double whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
  return rec(a, b, fa, fm, fb, whole, depth);
}

// Kolmogorov asymptotic survival function
inline double ks_pvalue_from_stat(double d, std::size_t n) {
  double sqn = std::sqrt(static_cast<double>(n));
  double lambda = (sqn + 0.12 + 0.11 / sqn) * d;
  double acc = 0.0;
  double sign = 1.0;
  for (int k = 1; k <= 100; ++k) {
    double term = std::exp(-2.0 * k * k * lambda * lambda);
    acc += sign * term;
    sign = -sign;
    if (term < 1e-12) break;
  }
  return std::min(1.0, std::max(0.0, 2.0 * acc));
}

// KS test of samples against a CDF
inline double ks_pvalue(std::vector<double> samples,
                        const std::function<double(double)>& cdf) {
  std::sort(samples.begin(), samples.end());
  std::size_t n = samples.size();
  double d = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double c = cdf(samples[i]);
    d = std::max(d, std::abs(c - static_cast<double>(i) / n));
    d = std::max(d, std::abs(static_cast<double>(i + 1) / n - c));
  }
  return ks_pvalue_from_stat(d, n);
}

// KS test of values that should be Uniform(0,1)
inline double ks_uniform_pvalue(std::vector<double> u) {
  return ks_pvalue(std::move(u), [](double x) { return std::min(1.0, std::max(0.0, x)); });
}

// chi-square upper-tail p-value
inline double chi2_pvalue(double stat, int dof) {
  return boost::math::gamma_q(0.5 * dof, 0.5 * stat);
}

// chi-square goodness-of-fit p-value from observed counts and expected
// probabilities (bins with tiny expectation folded into the neighbor)
inline double chi2_gof_pvalue(const std::vector<long long>& observed,
                              const std::vector<double>& expected_counts) {
  double stat = 0.0;
  int dof = -1;
  for (std::size_t b = 0; b < observed.size(); ++b) {
    if (expected_counts[b] < 5.0) continue;
    double d = static_cast<double>(observed[b]) - expected_counts[b];
    stat += d * d / expected_counts[b];
    ++dof;
  }
  return dof >= 1 ? chi2_pvalue(stat, dof) : 1.0;
}

// random symmetric positive-definite matrix with unit-ish scale
inline ddpf::Matrix random_pd(Eigen::Index n, ddpf::Rng& rng) {
  ddpf::Matrix a(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) a(i, j) = rng.normal();
  ddpf::Matrix s = a * a.transpose() / static_cast<double>(n);
  s.diagonal().array() += 0.5;
  return s;
}

// random simplex vector
inline ddpf::Vector random_simplex(Eigen::Index n, ddpf::Rng& rng) {
  ddpf::Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = rng.exponential();
  return v / v.sum();
}

inline double mean(const std::vector<double>& x) {
  double acc = 0.0;
  for (double v : x) acc += v;
  return acc / static_cast<double>(x.size());
}

inline double variance(const std::vector<double>& x) {
  double m = mean(x);
  double acc = 0.0;
  for (double v : x) acc += (v - m) * (v - m);
  return acc / static_cast<double>(x.size() - 1);
}

}  // namespace oracle
