#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "ddpf/em.hpp"
#include "ddpf/math.hpp"
#include "ddpf/model.hpp"
#include "ddpf/parallel.hpp"
#include "ddpf/rng.hpp"
#include "ddpf/types.hpp"

namespace ddpf {

inline constexpr double kRateFloor = 1e-300;

// ----------------------------------------------------------------------
// Step 1: latent totals
// ----------------------------------------------------------------------

// T_j ~ Gamma(n^j, sum_i sigma_i (Q_ij^+)^2), independently over samples.
inline Vector update_T(const LatentState& state, const CountTable& counts, Rng& rng) {
  Eigen::Index I = state.Q.rows(), J = state.Q.cols();
  Vector T(J);
  for (Eigen::Index j = 0; j < J; ++j) {
    double rate = 0.0;
    for (Eigen::Index i = 0; i < I; ++i) {
      double qp = state.Q(i, j) > 0.0 ? state.Q(i, j) : 0.0;
      rate += state.sigma[i] * qp * qp;
    }
    if (!(rate > 0.0))
      throw degenerate_column_error("sample column " + std::to_string(j) +
                                    " has zero total latent weight");
    double shape = static_cast<double>(counts.column_total(j));
    T[j] = rng.gamma(shape, std::max(rate, kRateFloor));
  }
  return T;
}

// ----------------------------------------------------------------------
// Step 2: per-cell latent weights
// ----------------------------------------------------------------------

struct ConditionalMoments {
  double mean;
  double var;
};

// Gaussian conditional of coordinate j of a zero-mean N(0, Sigma) vector
// given the other coordinates. Dense reference implementation.
inline ConditionalMoments conditional_mean_var(const Matrix& sigma,
                                               const Vector& q_others,
                                               Eigen::Index j) {
  Eigen::Index J = sigma.rows();
  if (j < 0 || j >= J) throw config_error("coordinate index out of range");
  if (q_others.size() != J - 1)
    throw config_error("q_others must have J-1 entries");
  Matrix rest(J - 1, J - 1);
  Vector cross(J - 1);
  Eigen::Index a = 0;
  for (Eigen::Index r = 0; r < J; ++r) {
    if (r == j) continue;
    cross[a] = sigma(j, r);
    Eigen::Index b = 0;
    for (Eigen::Index c = 0; c < J; ++c) {
      if (c == j) continue;
      rest(a, b++) = sigma(r, c);
    }
    ++a;
  }
  Eigen::LLT<Matrix> llt(rest);
  if (llt.info() != Eigen::Success)
    throw decomposition_error("conditional covariance is not positive definite");
  Vector solved = llt.solve(cross);
  double mean = solved.dot(q_others);
  double var = sigma(j, j) - solved.dot(cross);
  if (!(var > 0.0))
    throw decomposition_error("conditional variance is not positive");
  return {mean, var};
}

// Row precision of Q under Q_i ~ N(0, Y'Y + I/tau), via the Woodbury
// identity so the cost stays quadratic in J for small factor counts.
inline Matrix q_row_precision(const Matrix& Y, double tau_eps) {
  Eigen::Index m = Y.rows();
  Matrix A = Matrix::Identity(m, m) + tau_eps * (Y * Y.transpose());
  Eigen::LLT<Matrix> llt(A);
  if (llt.info() != Eigen::Success)
    throw decomposition_error("factor Gram matrix is not positive definite");
  Matrix W = llt.solve(Y);  // m x J
  Matrix prec = (-tau_eps * tau_eps) * (Y.transpose() * W);
  prec.diagonal().array() += tau_eps;
  return prec;
}

// Probability of the nonpositive branch in the zero-count conditional: a
// two-component truncated-normal mixture with Delta = 1 + 2 sigma T s^2.
inline double q_zero_negative_weight(double mu, double s2, double sigma_i, double t_j) {
  double delta = 1.0 + 2.0 * sigma_i * t_j * s2;
  double s = std::sqrt(s2);
  double log_a = normal_logcdf_std(-mu / s) + 0.5 * std::log(delta)
                 - mu * mu / (2.0 * s2 * delta);
  double log_b = -mu * mu / (2.0 * s2)
                 + normal_logcdf_std(mu / (s * std::sqrt(delta)));
  double d = log_b - log_a;
  if (d > 36.0) return std::exp(-d);
  if (d < -36.0) return 1.0 - std::exp(d);
  return 1.0 / (1.0 + std::exp(d));
}

// Exact draw from the zero-count conditional.
inline double update_Q_zero(double mu, double s2, double sigma_i, double t_j, Rng& rng) {
  if (!(s2 > 0.0)) throw config_error("conditional variance must be positive");
  double p1 = q_zero_negative_weight(mu, s2, sigma_i, t_j);
  double delta = 1.0 + 2.0 * sigma_i * t_j * s2;
  if (rng.uniform() < p1)
    return rng.normal_below(mu, std::sqrt(s2), 0.0);
  return rng.normal_above(mu / delta, std::sqrt(s2 / delta), 0.0);
}

// Unnormalized log conditional for a positive-count cell on (0, inf).
inline double log_q_positive_target(double q, long long n_ij, double mu, double s2,
                                    double sigma_i, double t_j) {
  if (q <= 0.0) return -std::numeric_limits<double>::infinity();
  double d = q - mu;
  return 2.0 * static_cast<double>(n_ij) * std::log(q) - t_j * sigma_i * q * q
         - d * d / (2.0 * s2);
}

struct LaplaceParams {
  double mean;
  double var;
};

// Closed-form mode and curvature of the positive-count conditional.
inline LaplaceParams laplace_params(long long n_ij, double mu, double s2,
                                    double sigma_i, double t_j) {
  if (n_ij < 1) throw config_error("laplace_params requires a positive count");
  if (!(s2 > 0.0)) throw config_error("conditional variance must be positive");
  double n = static_cast<double>(n_ij);
  double w = 2.0 * sigma_i * t_j + 1.0 / s2;
  double mu_hat = (mu / s2 + std::sqrt(mu * mu / (s2 * s2) + 8.0 * n * w)) / (2.0 * w);
  double var_hat = 1.0 / (2.0 * n / (mu_hat * mu_hat) + 2.0 * t_j * sigma_i + 1.0 / s2);
  return {mu_hat, var_hat};
}

// One Metropolis-Hastings transition with the Laplace independence proposal.
inline std::pair<double, bool> update_Q_positive(double current_q, long long n_ij,
                                                 double mu, double s2, double sigma_i,
                                                 double t_j, Rng& rng) {
  LaplaceParams prop = laplace_params(n_ij, mu, s2, sigma_i, t_j);
  double sd = std::sqrt(prop.var);
  double cand = prop.mean + sd * rng.normal();
  if (cand <= 0.0) return {current_q, false};
  double log_target_diff = log_q_positive_target(cand, n_ij, mu, s2, sigma_i, t_j)
                           - log_q_positive_target(current_q, n_ij, mu, s2, sigma_i, t_j);
  double dc = cand - prop.mean, dq = current_q - prop.mean;
  double log_prop_diff = (-dc * dc + dq * dq) / (2.0 * prop.var);
  double log_alpha = log_target_diff - log_prop_diff;
  if (log_alpha >= 0.0 || std::log(rng.uniform()) < log_alpha)
    return {cand, true};
  return {current_q, false};
}

// ----------------------------------------------------------------------
// Step 3: stick weights
// ----------------------------------------------------------------------

// Exact envelope-rejection draw from
//   p(x) ∝ x^{a-1} (1-x)^{b-1} exp(-c x) on (0,1),  a > 0, 0 < b < 1, c >= 0.
// For small c the envelope uses 16 equal-width pieces with the exponential
// factor bounded by its left-endpoint value and Beta(a,b) proposals. That
// grid resolves nothing once c is large, so beyond c = 100 the roles flip:
// a geometric grid in 1-x bounds the (1-x)^{b-1} factor per piece with
// Gamma(a,c) proposals, plus one Beta-tail piece next to 1. Both envelopes
// are exact; only acceptance differs.
inline double sample_sigma_tilted(double a, double b, double c, Rng& rng,
                                  long long* attempts = nullptr) {
  if (!(a > 0.0) || !(b > 0.0) || b >= 1.0)
    throw config_error("sigma conditional needs a > 0 and 0 < b < 1");
  if (!(c >= 0.0)) throw config_error("sigma conditional needs c >= 0");
  const double lo = std::numeric_limits<double>::min();
  const double hi = 1.0 - std::numeric_limits<double>::epsilon() / 2;
  auto clamp01 = [&](double x) { return std::min(hi, std::max(lo, x)); };

  if (c <= 1e-12) {
    if (attempts) ++*attempts;
    return rng.beta(a, b);
  }

  if (c <= 100.0) {
    const int K = 16;
    double cdf[K + 1];
    cdf[0] = 0.0;
    cdf[K] = 1.0;
    for (int k = 1; k < K; ++k)
      cdf[k] = beta_cdf(a, b, static_cast<double>(k) / K);
    double w[K];
    for (int k = 0; k < K; ++k)
      w[k] = std::exp(-c * static_cast<double>(k) / K) *
             std::max(0.0, cdf[k + 1] - cdf[k]);
    for (;;) {
      if (attempts) ++*attempts;
      std::size_t k = rng.pick(std::span<const double>(w, K));
      double u = cdf[k] + rng.uniform() * (cdf[k + 1] - cdf[k]);
      double x = beta_quantile(a, b, u);
      double g = static_cast<double>(k) / K;
      if (std::log(rng.uniform()) < -c * std::max(0.0, x - g)) return clamp01(x);
    }
  }

  // mode of the density, used only to size the grid
  double mode = a >= 1.0 ? std::min(1.0, a / c) : 1e-8;
  if (a > 1.0) {
    double s = a + b - 2.0 + c;
    double disc = s * s - 4.0 * c * (a - 1.0);
    if (disc > 0.0) {
      double root = (s - std::sqrt(disc)) / (2.0 * c);
      if (root > 0.0 && root < 1.0) mode = root;
    }
  }
  double t_min = std::min(10.0 / c, (1.0 - mode) / 4.0);
  t_min = std::max(t_min, 1e-14);

  std::vector<double> ts;
  for (double t = 1.0; t > t_min; t *= 0.75) ts.push_back(t);
  ts.push_back(t_min);
  std::size_t pieces = ts.size() - 1;

  double lgam = std::lgamma(a);
  double lga_c = lgam - a * std::log(c);
  std::vector<double> lw(pieces + 1);
  std::vector<double> cdf_lo(pieces), cdf_hi(pieces);
  for (std::size_t k = 0; k < pieces; ++k) {
    cdf_lo[k] = gamma_cdf(a, c * (1.0 - ts[k]));
    cdf_hi[k] = gamma_cdf(a, c * (1.0 - ts[k + 1]));
    double diff = std::max(0.0, cdf_hi[k] - cdf_lo[k]);
    lw[k] = diff > 0.0
                ? (b - 1.0) * std::log(ts[k + 1]) + std::log(diff) + lga_c
                : -std::numeric_limits<double>::infinity();
  }
  double tail_lo = beta_cdf(a, b, 1.0 - t_min);
  double tail_mass = std::max(0.0, 1.0 - tail_lo);
  lw[pieces] = tail_mass > 0.0
                   ? -c * (1.0 - t_min) + std::log(tail_mass) + log_beta_fn(a, b)
                   : -std::numeric_limits<double>::infinity();

  double mx = logsumexp(lw);
  if (!std::isfinite(mx))
    throw decomposition_error("sigma envelope degenerate");
  std::vector<double> w(pieces + 1);
  for (std::size_t k = 0; k <= pieces; ++k) w[k] = std::exp(lw[k] - mx);

  for (;;) {
    if (attempts) ++*attempts;
    std::size_t k = rng.pick(w);
    if (k < pieces) {
      double u = cdf_lo[k] + rng.uniform() * (cdf_hi[k] - cdf_lo[k]);
      double x = gamma_quantile(a, u) / c;
      if (x <= 0.0 || x >= 1.0) continue;
      double log_acc = (b - 1.0) * (std::log1p(-x) - std::log(ts[k + 1]));
      if (log_acc >= 0.0 || std::log(rng.uniform()) < log_acc) return clamp01(x);
    } else {
      double u = tail_lo + rng.uniform() * (1.0 - tail_lo);
      double x = beta_quantile(a, b, u);
      double log_acc = -c * std::max(0.0, x - (1.0 - t_min));
      if (std::log(rng.uniform()) < log_acc) return clamp01(x);
    }
  }
}

// sigma_i | rest with prior Beta(alpha/I, 1/2 - alpha/I), likelihood tilt
// sigma^{n_i} exp(-sigma c_i).
inline double update_sigma(long long n_i, double c_i, double alpha, Eigen::Index I,
                           Rng& rng) {
  double eps = alpha / static_cast<double>(I);
  if (eps >= 0.5) throw config_error("alpha/I must be below 1/2");
  if (!(c_i >= 0.0)) throw config_error("c_i must be nonnegative");
  return sample_sigma_tilted(eps + static_cast<double>(n_i), 0.5 - eps, c_i, rng);
}

// ----------------------------------------------------------------------
// Factor block (conjugate updates with Q as the observations)
// ----------------------------------------------------------------------

struct GaussianPosterior {
  Vector mean;
  Matrix precision;
};

// N(mean, precision^{-1}) draw given the natural parameters.
inline Vector mvn_sample_precision(const Matrix& precision, const Vector& linear,
                                   Rng& rng) {
  Eigen::LLT<Matrix> llt(precision);
  if (llt.info() != Eigen::Success)
    throw decomposition_error("posterior precision is not positive definite");
  Vector mean = llt.solve(linear);
  Vector z(linear.size());
  for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = rng.normal();
  Vector noise = llt.matrixU().solve(z);
  return mean + noise;
}

// Cross-row factor sums accumulated in a canonical row order, so the values
// are identical when rows carry permuted stream labels.
struct FactorSums {
  Matrix xxt;  // m x m, sum_i X_i X_i'
  Matrix xq;   // m x J, sum_i X_i Q_i
};

inline FactorSums factor_sums(const Matrix& Q, const Matrix& X,
                              const std::vector<std::size_t>& order) {
  Eigen::Index m = X.rows(), J = Q.cols();
  FactorSums sums{Matrix::Zero(m, m), Matrix::Zero(m, J)};
  for (std::size_t idx : order) {
    Eigen::Index i = static_cast<Eigen::Index>(idx);
    sums.xxt.noalias() += X.col(i) * X.col(i).transpose();
    sums.xq.noalias() += X.col(i) * Q.row(i);
  }
  return sums;
}

// Posterior of factor column Y^j given X, shrinkage weights and tau.
inline GaussianPosterior y_column_posterior(Eigen::Index j, const FactorSums& sums,
                                            const Vector& gamma_cum,
                                            const Matrix& gamma_local, double tau_eps) {
  Eigen::Index m = sums.xxt.rows();
  Matrix prec = tau_eps * sums.xxt;
  for (Eigen::Index l = 0; l < m; ++l)
    prec(l, l) += gamma_local(l, j) * gamma_cum[l];
  Vector linear = tau_eps * sums.xq.col(j);
  Eigen::LLT<Matrix> llt(prec);
  if (llt.info() != Eigen::Success)
    throw decomposition_error("factor posterior precision is not positive definite");
  return {llt.solve(linear), std::move(prec)};
}

// Conjugate updates of (Y, gamma_local, gamma, tau_eps) with X held at its
// freshly drawn value. Modifies fs in place; cross-row sums follow `order`.
inline void update_factors_given_x(const Matrix& Q, FactorState& fs,
                                   const Hyperparams& hyper, Rng& rng,
                                   const std::vector<std::size_t>& order) {
  Eigen::Index I = Q.rows(), J = Q.cols();
  Eigen::Index m = fs.Y.rows();
  double tau = fs.tau_eps;

  FactorSums sums = factor_sums(Q, fs.X, order);
  Vector cum = fs.gamma_cumprod();
  for (Eigen::Index j = 0; j < J; ++j) {
    auto post = y_column_posterior(j, sums, cum, fs.gamma_local, tau);
    Vector z(m);
    for (Eigen::Index l = 0; l < m; ++l) z[l] = rng.normal();
    Eigen::LLT<Matrix> llt(post.precision);
    fs.Y.col(j) = post.mean + llt.matrixU().solve(z);
  }

  for (Eigen::Index l = 0; l < m; ++l)
    for (Eigen::Index j = 0; j < J; ++j) {
      double y = fs.Y(l, j);
      fs.gamma_local(l, j) = rng.gamma((hyper.v + 1.0) / 2.0,
                                       (hyper.v + cum[l] * y * y) / 2.0);
    }

  // global increments sequentially, with products excluding the updated one
  for (Eigen::Index h = 0; h < m; ++h) {
    double shape = hyper.shrink_shape(static_cast<int>(h)) +
                   0.5 * static_cast<double>(J) * static_cast<double>(m - h);
    double rate = 1.0;
    double prod_ex = 1.0;
    for (Eigen::Index t = 0; t < h; ++t) prod_ex *= fs.gamma[t];
    for (Eigen::Index l = h; l < m; ++l) {
      if (l > h) prod_ex *= fs.gamma[l];
      double sum_j = 0.0;
      for (Eigen::Index j = 0; j < J; ++j)
        sum_j += fs.gamma_local(l, j) * fs.Y(l, j) * fs.Y(l, j);
      rate += 0.5 * prod_ex * sum_j;
    }
    fs.gamma[h] = rng.gamma(shape, std::max(rate, kRateFloor));
  }

  Matrix resid = Q - fs.X.transpose() * fs.Y;
  double rss = 0.0;
  for (Eigen::Index j = 0; j < J; ++j)
    for (std::size_t idx : order) {
      double r = resid(static_cast<Eigen::Index>(idx), j);
      rss += r * r;
    }
  fs.tau_eps = rng.gamma(hyper.tau_shape + 0.5 * static_cast<double>(I * J),
                         hyper.tau_rate + 0.5 * rss);
}

// One conjugate sweep over (X, Y, gamma_local, gamma, tau_eps).
inline FactorState update_factors(const Matrix& Q, const FactorState& fs,
                                  const Hyperparams& hyper, Rng& rng) {
  Eigen::Index I = Q.rows(), J = Q.cols();
  Eigen::Index m = fs.Y.rows();
  if (fs.X.cols() != I || fs.Y.cols() != J)
    throw config_error("factor state dimensions do not match Q");
  FactorState next = fs;
  double tau = fs.tau_eps;

  // X_i | Y, tau, Q
  Matrix x_prec = Matrix::Identity(m, m) + tau * (next.Y * next.Y.transpose());
  Eigen::LLT<Matrix> x_llt(x_prec);
  if (x_llt.info() != Eigen::Success)
    throw decomposition_error("X posterior precision is not positive definite");
  for (Eigen::Index i = 0; i < I; ++i) {
    Vector linear = tau * (next.Y * Q.row(i).transpose());
    Vector mean = x_llt.solve(linear);
    Vector z(m);
    for (Eigen::Index l = 0; l < m; ++l) z[l] = rng.normal();
    next.X.col(i) = mean + x_llt.matrixU().solve(z);
  }

  update_factors_given_x(Q, next, hyper, rng, row_order(static_cast<std::size_t>(I), {}));
  return next;
}

// ----------------------------------------------------------------------
// Chain driver
// ----------------------------------------------------------------------

struct Snapshot {
  long long iteration = 0;
  Vector sigma;
  Matrix Q;  // empty when recording of Q is disabled
  Matrix Y;
  Matrix S;
  Matrix P;
};

struct TraceSummary {
  double mean = 0.0;
  double variance = 0.0;
  double lag1_autocorr = 0.0;
};

inline TraceSummary summarize_trace(const std::vector<double>& x) {
  TraceSummary out;
  std::size_t n = x.size();
  if (n == 0) return out;
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0, cov = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    double d = x[t] - mean;
    var += d * d;
    if (t + 1 < n) cov += d * (x[t + 1] - mean);
  }
  out.mean = mean;
  out.variance = n > 1 ? var / static_cast<double>(n - 1) : 0.0;
  out.lag1_autocorr = var > 0.0 ? cov / var : 0.0;
  return out;
}

struct AcceptanceBin {
  long long lo = 0;
  long long hi = 0;  // inclusive; -1 marks an unbounded bin
  long long proposals = 0;
  long long accepted = 0;
  double rate() const {
    return proposals > 0 ? static_cast<double>(accepted) / static_cast<double>(proposals)
                         : 1.0;
  }
};

struct ChainDiagnostics {
  double mh_acceptance_rate = 1.0;
  std::vector<AcceptanceBin> acceptance_bins;
  std::map<std::string, TraceSummary> traces;
};

struct ChainOptions {
  int workers = -1;
  bool record_q = true;
  bool keep_draws = true;
  // RNG substream labels per OTU; defaults to row indices. Supplying the
  // permuted labels makes chain output equivariant under row permutation.
  std::vector<std::uint64_t> otu_stream_ids;
  EmSettings em_init;
  std::function<void(const Snapshot&)> sink;
};

struct PosteriorDraws {
  std::vector<Snapshot> draws;
  ChainSettings settings;
  Eigen::Index I = 0;
  Eigen::Index J = 0;
  int m = 0;
};

inline long long expected_snapshots(const ChainSettings& s) {
  return (s.iterations - s.burn_in) / s.thin;
}

// Full sampler: Step 1 (T) -> Step 2 (Q) -> Step 3 (sigma) -> factor block,
// recording thinned post-burn-in snapshots. Per-OTU updates run in parallel
// on disjoint rows with substreams keyed by (iteration, OTU label), so the
// draws are identical for any worker count.
inline std::pair<PosteriorDraws, ChainDiagnostics> run_chain(
    const CountTable& counts, const Hyperparams& hyper,
    const ChainOptions& options = {}) {
  counts.validate();
  Eigen::Index I = counts.n_otus(), J = counts.n_samples();
  hyper.validate(I);
  int m = hyper.resolve_m(J);
  std::uint64_t seed = hyper.chain.seed;
  double eps = hyper.alpha / static_cast<double>(I);

  std::vector<std::uint64_t> sid = options.otu_stream_ids;
  if (sid.empty()) {
    sid.resize(I);
    for (Eigen::Index i = 0; i < I; ++i) sid[i] = static_cast<std::uint64_t>(i);
  } else if (static_cast<Eigen::Index>(sid.size()) != I) {
    throw config_error("otu_stream_ids length must match the OTU count");
  }
  std::vector<std::size_t> ord = row_order(static_cast<std::size_t>(I), sid);

  // --- initialization ---
  EmSettings em_settings = options.em_init;
  em_settings.workers = options.workers;
  em_settings.row_stream_ids = sid;
  EmResult em = run_em(counts, em_settings, seed);

  double eps_b = 0.5 - eps;
  LatentState state;
  state.sigma.resize(I);
  for (Eigen::Index i = 0; i < I; ++i) {
    Rng r = Rng::keyed(seed, stream::kChainInit, 1, sid[i]);
    state.sigma[i] = r.beta(eps, eps_b);
  }
  Vector sigma_hat = moment_sigma(counts);
  state.Q.resize(I, J);
  for (Eigen::Index i = 0; i < I; ++i)
    for (Eigen::Index j = 0; j < J; ++j) {
      long long nij = counts.counts(i, j);
      state.Q(i, j) = nij > 0
                          ? std::sqrt(static_cast<double>(nij) / sigma_hat[i])
                          : -0.1;
    }

  FactorState fs;
  {
    fs.X.resize(m, I);
    for (Eigen::Index i = 0; i < I; ++i) {
      Rng r = Rng::keyed(seed, stream::kChainInit, 2, sid[i]);
      for (int l = 0; l < m; ++l) fs.X(l, i) = r.normal();
    }
    Rng r = Rng::keyed(seed, stream::kChainInit, 3);
    fs.gamma.resize(m);
    for (int l = 0; l < m; ++l) fs.gamma[l] = r.gamma(hyper.shrink_shape(l), 1.0);
    fs.gamma_local.resize(m, J);
    for (int l = 0; l < m; ++l)
      for (Eigen::Index j = 0; j < J; ++j)
        fs.gamma_local(l, j) = r.gamma(hyper.v / 2.0, hyper.v / 2.0);
    fs.tau_eps = r.gamma(hyper.tau_shape, hyper.tau_rate);
    // Y starts at the spectral factorization of the EM similarity
    fs.Y.resize(m, J);
    Eigen::SelfAdjointEigenSolver<Matrix> es(em.S.S);
    if (es.info() != Eigen::Success)
      throw decomposition_error("EM similarity eigendecomposition failed");
    for (int l = 0; l < m; ++l) {
      Eigen::Index rank = J - 1 - l;  // eigenvalues come back ascending
      if (rank >= 0 && es.eigenvalues()[rank] > 0.0)
        fs.Y.row(l) = std::sqrt(es.eigenvalues()[rank]) *
                      es.eigenvectors().col(rank).transpose();
      else
        fs.Y.row(l).setConstant(0.01);
    }
  }

  Vector col_totals(J);
  Vector row_totals(I);
  for (Eigen::Index j = 0; j < J; ++j)
    col_totals[j] = static_cast<double>(counts.column_total(j));
  for (Eigen::Index i = 0; i < I; ++i)
    row_totals[i] = static_cast<double>(counts.row_total(i));

  ChainDiagnostics diag;
  diag.acceptance_bins = {{1, 4, 0, 0}, {5, 19, 0, 0}, {20, 49, 0, 0}, {50, -1, 0, 0}};
  auto bin_of = [](long long n) {
    if (n < 5) return 0;
    if (n < 20) return 1;
    if (n < 50) return 2;
    return 3;
  };

  PosteriorDraws draws;
  draws.settings = hyper.chain;
  draws.I = I;
  draws.J = J;
  draws.m = m;

  std::vector<double> trace_tau, trace_sigma_mean;
  std::vector<std::vector<double>> trace_gamma(std::min(m, 3));

  Eigen::Matrix<long long, Eigen::Dynamic, 4> row_prop(I, 4), row_acc(I, 4);

  state.T.resize(J);
  for (long long iter = 1; iter <= hyper.chain.iterations; ++iter) {
    try {
      // Step 1, with rates accumulated in canonical row order
      {
        Rng r = Rng::keyed(seed, stream::kChainT, static_cast<std::uint64_t>(iter));
        for (Eigen::Index j = 0; j < J; ++j) {
          double rate = 0.0;
          for (std::size_t idx : ord) {
            Eigen::Index i = static_cast<Eigen::Index>(idx);
            double qp = state.Q(i, j) > 0.0 ? state.Q(i, j) : 0.0;
            rate += state.sigma[i] * (qp * qp);
          }
          if (!(rate > 0.0))
            throw degenerate_column_error("sample column " + std::to_string(j) +
                                          " has zero total latent weight");
          state.T[j] = r.gamma(col_totals[j], std::max(rate, kRateFloor));
        }
      }

      // Step 2
      Matrix prec = q_row_precision(fs.Y, fs.tau_eps);
      row_prop.setZero();
      row_acc.setZero();
      parallel_for(static_cast<std::size_t>(I), [&](std::size_t ii) {
        Eigen::Index i = static_cast<Eigen::Index>(ii);
        Rng r = Rng::keyed(seed, stream::kChainQ, static_cast<std::uint64_t>(iter), sid[i]);
        Vector q = state.Q.row(i).transpose();
        Vector v = prec * q;
        for (Eigen::Index j = 0; j < J; ++j) {
          double s2 = 1.0 / prec(j, j);
          double mu = q[j] - v[j] * s2;
          long long nij = counts.counts(i, j);
          double qn;
          if (nij == 0) {
            qn = update_Q_zero(mu, s2, state.sigma[i], state.T[j], r);
          } else {
            auto [val, acc] = update_Q_positive(q[j], nij, mu, s2, state.sigma[i],
                                                state.T[j], r);
            qn = val;
            int b = bin_of(nij);
            ++row_prop(i, b);
            if (acc) ++row_acc(i, b);
          }
          double delta = qn - q[j];
          if (delta != 0.0) {
            v += delta * prec.col(j);
            q[j] = qn;
          }
        }
        state.Q.row(i) = q.transpose();
      }, options.workers);
      for (Eigen::Index i = 0; i < I; ++i)
        for (int b = 0; b < 4; ++b) {
          diag.acceptance_bins[b].proposals += row_prop(i, b);
          diag.acceptance_bins[b].accepted += row_acc(i, b);
        }

      // Step 3
      parallel_for(static_cast<std::size_t>(I), [&](std::size_t ii) {
        Eigen::Index i = static_cast<Eigen::Index>(ii);
        Rng r = Rng::keyed(seed, stream::kChainSigma, static_cast<std::uint64_t>(iter),
                           sid[i]);
        double c_i = 0.0;
        for (Eigen::Index j = 0; j < J; ++j) {
          double qp = state.Q(i, j) > 0.0 ? state.Q(i, j) : 0.0;
          c_i += state.T[j] * qp * qp;
        }
        state.sigma[i] = sample_sigma_tilted(eps + row_totals[i], 0.5 - eps, c_i, r);
      }, options.workers);

      // factor block: X rows in parallel, the rest serially
      {
        Matrix x_prec = Matrix::Identity(m, m) +
                        fs.tau_eps * (fs.Y * fs.Y.transpose());
        Eigen::LLT<Matrix> x_llt(x_prec);
        if (x_llt.info() != Eigen::Success)
          throw decomposition_error("X posterior precision is not positive definite");
        parallel_for(static_cast<std::size_t>(I), [&](std::size_t ii) {
          Eigen::Index i = static_cast<Eigen::Index>(ii);
          Rng r = Rng::keyed(seed, stream::kChainX, static_cast<std::uint64_t>(iter),
                             sid[i]);
          Vector linear = fs.tau_eps * (fs.Y * state.Q.row(i).transpose());
          Vector mean = x_llt.solve(linear);
          Vector z(m);
          for (int l = 0; l < m; ++l) z[l] = r.normal();
          fs.X.col(i) = mean + x_llt.matrixU().solve(z);
        }, options.workers);

        Rng r = Rng::keyed(seed, stream::kChainFactors, static_cast<std::uint64_t>(iter));
        update_factors_given_x(state.Q, fs, hyper, r, ord);
      }

      // snapshot
      if (iter > hyper.chain.burn_in &&
          (iter - hyper.chain.burn_in) % hyper.chain.thin == 0) {
        Snapshot snap;
        snap.iteration = iter;
        snap.sigma = state.sigma;
        if (options.record_q) snap.Q = state.Q;
        snap.Y = fs.Y;
        snap.S = normalized_gram(fs.Y).S;
        snap.P = compose_measures(state.sigma, state.Q).P;
        trace_tau.push_back(fs.tau_eps);
        trace_sigma_mean.push_back(state.sigma.mean());
        for (std::size_t l = 0; l < trace_gamma.size(); ++l)
          trace_gamma[l].push_back(fs.gamma[static_cast<Eigen::Index>(l)]);
        if (options.sink) options.sink(snap);
        if (options.keep_draws) draws.draws.push_back(std::move(snap));
      }
    } catch (const error& e) {
      throw error("iteration " + std::to_string(iter) + ": " + e.what());
    }
  }

  long long total_prop = 0, total_acc = 0;
  for (const auto& b : diag.acceptance_bins) {
    total_prop += b.proposals;
    total_acc += b.accepted;
  }
  diag.mh_acceptance_rate =
      total_prop > 0 ? static_cast<double>(total_acc) / static_cast<double>(total_prop)
                     : 1.0;
  diag.traces["tau_eps"] = summarize_trace(trace_tau);
  diag.traces["sigma_mean"] = summarize_trace(trace_sigma_mean);
  for (std::size_t l = 0; l < trace_gamma.size(); ++l)
    diag.traces["gamma_" + std::to_string(l + 1)] = summarize_trace(trace_gamma[l]);
  return {std::move(draws), std::move(diag)};
}

// ----------------------------------------------------------------------
// Laplace-approximation diagnostic bound
// ----------------------------------------------------------------------

// Upper bound of the total variation distance between the positive-count
// conditional with frequency k and its Laplace proposal: the maximum of two
// integrals of exp(V(x;k,1)) against N(1, 1/(2k)).
inline double tv_bound(long long k) {
  if (k < 1) throw config_error("tv_bound requires k >= 1");
  double kd = static_cast<double>(k);
  double var = 1.0 / (2.0 * kd);
  double sd = std::sqrt(var);
  // exp(V(x;k,1)) * f(x;1,var) collapses to sqrt(k/pi) exp(2k(log x - x + 1))
  auto tilted = [kd](double x) {
    if (x <= 0.0) return 0.0;
    return std::sqrt(kd / M_PI) * std::exp(2.0 * kd * (std::log(x) - x + 1.0));
  };
  auto f = [var](double x) { return normal_pdf(x, 1.0, var); };
  using quad = boost::math::quadrature::gauss_kronrod<double, 61>;
  double upper = 1.0 + 50.0 * sd + 10.0;
  double above = quad::integrate([&](double x) { return tilted(x) - f(x); }, 1.0,
                                 upper, 12, 1e-10);
  double below = quad::integrate([&](double x) { return f(x) - tilted(x); }, 0.0,
                                 1.0, 12, 1e-10);
  below += normal_cdf_std((0.0 - 1.0) / sd);  // V = -inf for x <= 0
  return std::max(above, below);
}

}  // namespace ddpf
