#pragma once

#include <cmath>
#include <string>

#include "ddpf/rng.hpp"
#include "ddpf/types.hpp"

namespace ddpf {

// I iid Beta(alpha/I, 1/2 - alpha/I) points: the truncated version of the
// Poisson process with intensity alpha * s^-1 (1-s)^-1/2 on (0,1).
inline Vector sample_prior_sigma(Eigen::Index I, double alpha, Rng& rng) {
  if (I < 1) throw config_error("I must be positive");
  double eps = alpha / static_cast<double>(I);
  if (alpha <= 0.0 || eps >= 0.5)
    throw config_error("invalid Beta parameter: require 0 < alpha/I < 1/2");
  Vector sigma(I);
  for (Eigen::Index i = 0; i < I; ++i) sigma[i] = rng.beta(eps, 0.5 - eps);
  return sigma;
}

// One draw of the shrinkage-prior factor block. Y variances decay with the
// factor index through cumulative products of the gamma increments.
inline FactorState sample_prior_factors(Eigen::Index J, const Hyperparams& hyper,
                                        Rng& rng, Eigen::Index I = 0) {
  int m = hyper.resolve_m(J > 0 ? J : 1);
  if (m < 1) throw config_error("factor truncation m must be at least 1");
  FactorState fs;
  fs.gamma.resize(m);
  for (int l = 0; l < m; ++l) fs.gamma[l] = rng.gamma(hyper.shrink_shape(l), 1.0);
  fs.gamma_local.resize(m, J);
  for (int l = 0; l < m; ++l)
    for (Eigen::Index j = 0; j < J; ++j)
      fs.gamma_local(l, j) = rng.gamma(hyper.v / 2.0, hyper.v / 2.0);
  Vector cum = fs.gamma_cumprod();
  fs.Y.resize(m, J);
  for (int l = 0; l < m; ++l)
    for (Eigen::Index j = 0; j < J; ++j)
      fs.Y(l, j) = rng.normal() / std::sqrt(fs.gamma_local(l, j) * cum[l]);
  fs.X.resize(m, I);
  for (int l = 0; l < m; ++l)
    for (Eigen::Index i = 0; i < I; ++i) fs.X(l, i) = rng.normal();
  fs.tau_eps = rng.gamma(hyper.tau_shape, hyper.tau_rate);
  return fs;
}

namespace detail {
inline DistributionSet normalize_weight_columns(Matrix w) {
  for (Eigen::Index j = 0; j < w.cols(); ++j) {
    double total = w.col(j).sum();
    if (!(total > 0.0))
      throw degenerate_column_error(
          "column " + std::to_string(j) + " has no positive latent weight");
    w.col(j) /= total;
  }
  return DistributionSet{std::move(w)};
}
}  // namespace detail

// P^j_i = sigma_i (Q_ij^+)^2 / sum_k sigma_k (Q_kj^+)^2
inline DistributionSet compose_measures(const Vector& sigma, const Matrix& Q) {
  if (sigma.size() != Q.rows())
    throw config_error("sigma length must match Q rows");
  Matrix w(Q.rows(), Q.cols());
  for (Eigen::Index j = 0; j < Q.cols(); ++j)
    for (Eigen::Index i = 0; i < Q.rows(); ++i) {
      double qp = Q(i, j) > 0.0 ? Q(i, j) : 0.0;
      w(i, j) = sigma[i] * (qp * qp);
    }
  return detail::normalize_weight_columns(std::move(w));
}

// Weights proportional to sigma_i <X_i, Y^j>^{+a}; a = 2 coincides with
// compose_measures on Q = X'Y.
inline DistributionSet simulate_misspecified(const Vector& sigma, const Matrix& X,
                                             const Matrix& Y, double a) {
  if (a <= 0.0) throw config_error("power a must be positive");
  if (X.rows() != Y.rows()) throw config_error("X and Y factor dimensions differ");
  if (sigma.size() != X.cols()) throw config_error("sigma length must match X columns");
  Matrix ip = X.transpose() * Y;  // I x J
  Matrix w(ip.rows(), ip.cols());
  for (Eigen::Index j = 0; j < ip.cols(); ++j)
    for (Eigen::Index i = 0; i < ip.rows(); ++i) {
      double qp = ip(i, j) > 0.0 ? ip(i, j) : 0.0;
      // the quadratic case must coincide bit-for-bit with compose_measures
      w(i, j) = sigma[i] * (a == 2.0 ? qp * qp : std::pow(qp, a));
    }
  return detail::normalize_weight_columns(std::move(w));
}

// Monte-Carlo estimate of corr(P^j(A), P^{j'}(A)) as a ratio of expectations,
// with (Q_j, Q_j') bivariate normal pairs of correlation phi. Independent of
// the set A; phi = 1 gives exactly 1 because the two expectations coincide
// draw by draw.
inline double estimate_eta(double phi, double alpha, Eigen::Index I,
                           long long mc_reps, Rng& rng) {
  if (phi < -1.0 || phi > 1.0) throw config_error("phi must lie in [-1,1]");
  if (mc_reps < 100) throw config_error("mc_reps must be at least 100");
  double eps = alpha / static_cast<double>(I);
  if (eps >= 0.5) throw config_error("alpha/I must be below 1/2");
  double root = std::sqrt(std::max(0.0, 1.0 - phi * phi));
  double num_acc = 0.0, den_acc = 0.0;
  long long used = 0;
  for (long long r = 0; r < mc_reps; ++r) {
    double num = 0.0, den_j = 0.0, den_jp = 0.0, var_num = 0.0;
    for (Eigen::Index i = 0; i < I; ++i) {
      double s = rng.beta(eps, 0.5 - eps);
      double z1 = rng.normal();
      double z2 = rng.normal();
      double qj = z1;
      double qjp = phi * z1 + root * z2;
      double aj = qj > 0.0 ? qj * qj : 0.0;
      double ajp = qjp > 0.0 ? qjp * qjp : 0.0;
      num += s * s * aj * ajp;
      var_num += s * s * aj * aj;
      den_j += s * aj;
      den_jp += s * ajp;
    }
    if (den_j > 0.0 && den_jp > 0.0) {
      num_acc += num / (den_j * den_jp);
      den_acc += var_num / (den_j * den_j);
      ++used;
    }
  }
  if (used == 0 || den_acc <= 0.0)
    throw degenerate_column_error("eta estimate degenerate: no usable replicates");
  return num_acc / den_acc;
}

// Multinomial draw per sample column with fixed totals.
inline CountTable simulate_dataset(const DistributionSet& P,
                                   const std::vector<long long>& totals, Rng& rng) {
  Eigen::Index I = P.P.rows(), J = P.P.cols();
  if (static_cast<Eigen::Index>(totals.size()) != J)
    throw config_error("totals length must match sample count");
  CountTable table;
  table.counts.resize(I, J);
  std::vector<double> col(I);
  for (Eigen::Index j = 0; j < J; ++j) {
    if (totals[j] < 1) throw config_error("totals must be at least 1");
    for (Eigen::Index i = 0; i < I; ++i) col[i] = P.P(i, j);
    auto draws = rng.multinomial(totals[j], col);
    for (Eigen::Index i = 0; i < I; ++i) table.counts(i, j) = draws[i];
  }
  table.otu_ids.reserve(I);
  table.sample_ids.reserve(J);
  for (Eigen::Index i = 0; i < I; ++i) table.otu_ids.push_back("otu" + std::to_string(i + 1));
  for (Eigen::Index j = 0; j < J; ++j) table.sample_ids.push_back("s" + std::to_string(j + 1));
  return table;
}

// --- synthetic factor designs used by the simulation CLI and experiments ---

enum class FactorDesign { kBlocks, kEquicorrelated, kTwoClusters };

// Latent Y (L x J) for the three simulation designs:
//  - kBlocks: first half of samples loads only on factors 1..floor(L/2),
//    second half only on the remaining ones (block-diagonal similarity)
//  - kEquicorrelated: each factor row drawn with cov(Y_lj, Y_lj') = theta
//  - kTwoClusters: factor entries N(-3,1) for the first half of samples and
//    N(+3,1) for the second half
inline Matrix make_design_factors(FactorDesign design, Eigen::Index L, Eigen::Index J,
                                  double theta, Rng& rng) {
  Matrix Y = Matrix::Zero(L, J);
  switch (design) {
    case FactorDesign::kBlocks: {
      if (L < 2) throw config_error("blocks design needs at least two factors");
      Eigen::Index half_l = L / 2;  // first sample group loads on factors < half_l
      Eigen::Index half_j = J / 2;
      for (Eigen::Index l = 0; l < L; ++l)
        for (Eigen::Index j = 0; j < J; ++j) {
          bool active = (j < half_j) ? (l < half_l) : (l >= half_l);
          Y(l, j) = active ? rng.normal() : 0.0;
        }
      break;
    }
    case FactorDesign::kEquicorrelated: {
      if (theta < 0.0 || theta >= 1.0)
        throw config_error("theta must lie in [0,1)");
      double shared_sd = std::sqrt(theta);
      double own_sd = std::sqrt(1.0 - theta);
      for (Eigen::Index l = 0; l < L; ++l) {
        double shared = rng.normal() * shared_sd;
        for (Eigen::Index j = 0; j < J; ++j)
          Y(l, j) = shared + own_sd * rng.normal();
      }
      break;
    }
    case FactorDesign::kTwoClusters: {
      Eigen::Index half_j = J / 2;
      for (Eigen::Index l = 0; l < L; ++l)
        for (Eigen::Index j = 0; j < J; ++j)
          Y(l, j) = (j < half_j ? -3.0 : 3.0) + rng.normal();
      break;
    }
  }
  return Y;
}

// Normalized Gram matrix D^{-1/2} (Y'Y) D^{-1/2}; numerically zero columns
// get a unit diagonal and zero off-diagonals.
inline GramMatrix normalized_gram(const Matrix& Y, double zero_tol = 1e-10) {
  Eigen::Index J = Y.cols();
  Matrix G = Y.transpose() * Y;
  Vector norms(J);
  for (Eigen::Index j = 0; j < J; ++j) norms[j] = std::sqrt(G(j, j));
  Matrix S = Matrix::Zero(J, J);
  for (Eigen::Index a = 0; a < J; ++a) {
    for (Eigen::Index b = 0; b < J; ++b) {
      if (norms[a] < zero_tol || norms[b] < zero_tol)
        S(a, b) = (a == b) ? 1.0 : 0.0;
      else
        S(a, b) = G(a, b) / (norms[a] * norms[b]);
    }
    S(a, a) = 1.0;
  }
  return GramMatrix{std::move(S)};
}

}  // namespace ddpf
