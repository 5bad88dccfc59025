#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>

#include <boost/math/special_functions/beta.hpp>
#include <boost/math/special_functions/gamma.hpp>

namespace ddpf {

inline constexpr double kLog2Pi = 1.8378770664093454836;

inline double normal_pdf(double x, double mu, double var) {
  double d = x - mu;
  return std::exp(-0.5 * d * d / var) / std::sqrt(2.0 * M_PI * var);
}

inline double normal_cdf_std(double z) {
  return 0.5 * std::erfc(-z * M_SQRT1_2);
}

// log Phi(z), stable down to the deep lower tail
inline double normal_logcdf_std(double z) {
  if (z > -37.0) {
    double c = 0.5 * std::erfc(-z * M_SQRT1_2);
    if (c > 0.0) return std::log(c);
  }
  // asymptotic expansion of the Mills ratio
  double z2 = z * z;
  double series = 1.0 - 1.0 / z2 + 3.0 / (z2 * z2) - 15.0 / (z2 * z2 * z2);
  return -0.5 * z2 - 0.5 * kLog2Pi - std::log(-z) + std::log(series);
}

inline double log_normal_pdf(double x, double mu, double var) {
  double d = x - mu;
  return -0.5 * (kLog2Pi + std::log(var)) - 0.5 * d * d / var;
}

inline double logsumexp(std::span<const double> v) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : v) mx = std::max(mx, x);
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

// regularized incomplete beta / gamma (CDFs of Beta and Gamma(shape,1))
inline double beta_cdf(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  return boost::math::ibeta(a, b, x);
}

inline double beta_quantile(double a, double b, double p) {
  if (p <= 0.0) return 0.0;
  if (p >= 1.0) return 1.0;
  return boost::math::ibeta_inv(a, b, p);
}

inline double gamma_cdf(double shape, double x) {
  if (x <= 0.0) return 0.0;
  return boost::math::gamma_p(shape, x);
}

inline double gamma_quantile(double shape, double p) {
  if (p <= 0.0) return 0.0;
  return boost::math::gamma_p_inv(shape, p);
}

inline double log_beta_fn(double a, double b) {
  return std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b);
}

}  // namespace ddpf
