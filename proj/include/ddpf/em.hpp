#pragma once

#include <cmath>
#include <iostream>
#include <vector>

#include "ddpf/parallel.hpp"
#include "ddpf/rng.hpp"
#include "ddpf/types.hpp"

namespace ddpf {

// Correlation normalization of a covariance matrix; rows/columns with
// near-zero variance become unit-diagonal with zero couplings.
inline Matrix correlation_from_covariance(const Matrix& cov, double zero_tol = 1e-12) {
  Eigen::Index J = cov.rows();
  Vector sd(J);
  for (Eigen::Index j = 0; j < J; ++j) sd[j] = std::sqrt(std::max(0.0, cov(j, j)));
  Matrix corr = Matrix::Zero(J, J);
  for (Eigen::Index a = 0; a < J; ++a) {
    for (Eigen::Index b = 0; b < J; ++b) {
      if (sd[a] < zero_tol || sd[b] < zero_tol)
        corr(a, b) = (a == b) ? 1.0 : 0.0;
      else
        corr(a, b) = cov(a, b) / (sd[a] * sd[b]);
    }
    corr(a, a) = 1.0;
  }
  return corr;
}

// sigma_hat_i = (1/J) sum_j n_ij / (n^j - n_ij), clipped into (1e-8, 1-1e-8).
inline Vector moment_sigma(const CountTable& counts,
                           std::vector<std::string>* warnings = nullptr) {
  const double kClipLo = 1e-8, kClipHi = 1.0 - 1e-8;
  Eigen::Index I = counts.n_otus(), J = counts.n_samples();
  Vector sigma_hat(I);
  for (Eigen::Index i = 0; i < I; ++i) {
    double acc = 0.0;
    bool overflow = false;
    for (Eigen::Index j = 0; j < J; ++j) {
      long long nij = counts.counts(i, j);
      long long rest = counts.column_total(j) - nij;
      if (rest <= 0) {
        overflow = true;
        acc += 2.0 / kClipLo;  // forces the clip ceiling after averaging
      } else {
        acc += static_cast<double>(nij) / static_cast<double>(rest);
      }
    }
    double val = acc / static_cast<double>(J);
    if ((val <= kClipLo || val >= kClipHi || overflow) && warnings)
      warnings->push_back("moment_sigma: clipping engaged for OTU index " +
                          std::to_string(i));
    sigma_hat[i] = std::min(kClipHi, std::max(kClipLo, val));
  }
  return sigma_hat;
}

// Observed transform sqrt(n_ij / sigma_hat_i) where counts are positive;
// zero-count cells are negative-censored.
struct TruncatedData {
  Matrix q_tilde;                            // valid where !censored
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> censored;
  Vector sigma_hat;
};

inline TruncatedData make_truncated_data(const CountTable& counts,
                                         std::vector<std::string>* warnings = nullptr) {
  TruncatedData data;
  data.sigma_hat = moment_sigma(counts, warnings);
  Eigen::Index I = counts.n_otus(), J = counts.n_samples();
  data.q_tilde = Matrix::Zero(I, J);
  data.censored.resize(I, J);
  for (Eigen::Index i = 0; i < I; ++i)
    for (Eigen::Index j = 0; j < J; ++j) {
      long long nij = counts.counts(i, j);
      data.censored(i, j) = (nij == 0);
      if (nij > 0)
        data.q_tilde(i, j) =
            std::sqrt(static_cast<double>(nij) / data.sigma_hat[i]);
    }
  return data;
}

namespace detail {

// Precision of Sigma with a ridge escalation for ill-conditioned inputs.
inline Matrix robust_precision(Matrix sigma, std::vector<std::string>* warnings) {
  double ridge = 1e-6;
  for (int attempt = 0; attempt < 8; ++attempt) {
    Eigen::LLT<Matrix> llt(sigma);
    if (llt.info() == Eigen::Success)
      return llt.solve(Matrix::Identity(sigma.rows(), sigma.cols()));
    if (warnings)
      warnings->push_back("e_step: conditioning failure, ridge " +
                          std::to_string(ridge) + " added");
    sigma.diagonal().array() += ridge;
    ridge *= 10.0;
  }
  throw decomposition_error("covariance not positive definite after ridging");
}

// One row's truncated-normal Gibbs imputation: observed coordinates are
// clamped at q_tilde, censored coordinates sampled negative under the
// N(0, Sigma_t) row model. Returns D recorded full vectors.
inline Matrix impute_row(const Matrix& precision, const TruncatedData& data,
                         Eigen::Index i, int D, Rng& rng) {
  const int kBurnSweeps = 8, kThinSweeps = 2;
  Eigen::Index J = data.q_tilde.cols();
  std::vector<Eigen::Index> cens;
  for (Eigen::Index j = 0; j < J; ++j)
    if (data.censored(i, j)) cens.push_back(j);

  Vector q(J);
  for (Eigen::Index j = 0; j < J; ++j)
    q[j] = data.censored(i, j) ? -0.5 : data.q_tilde(i, j);

  Matrix out(D, J);
  if (cens.empty()) {
    for (int d = 0; d < D; ++d) out.row(d) = q.transpose();
    return out;
  }

  Vector r = precision * q;
  auto sweep = [&] {
    for (Eigen::Index j : cens) {
      double prec_jj = precision(j, j);
      double mu = q[j] - r[j] / prec_jj;
      double sd = std::sqrt(1.0 / prec_jj);
      double t = rng.normal_below(mu, sd, 0.0);
      double delta = t - q[j];
      if (delta != 0.0) {
        r += delta * precision.col(j);
        q[j] = t;
      }
    }
  };
  for (int s = 0; s < kBurnSweeps; ++s) sweep();
  for (int d = 0; d < D; ++d) {
    for (int s = 0; s < kThinSweeps; ++s) sweep();
    out.row(d) = q.transpose();
  }
  return out;
}

}  // namespace detail

// Monte-Carlo E-step: D joint imputations per OTU row. Serial reference
// entry point with caller-provided RNG.
inline std::vector<Matrix> e_step(const Matrix& sigma_t, const TruncatedData& data,
                                  int D, Rng& rng,
                                  std::vector<std::string>* warnings = nullptr) {
  if (D < 1) throw config_error("E-step replicate count D must be at least 1");
  Matrix precision = detail::robust_precision(sigma_t, warnings);
  Eigen::Index I = data.q_tilde.rows();
  std::vector<Matrix> imputed(I);
  for (Eigen::Index i = 0; i < I; ++i)
    imputed[i] = detail::impute_row(precision, data, i, D, rng);
  return imputed;
}

// Canonical accumulation order: row positions sorted by their stream label.
// With default labels this is plain index order; with permuted labels every
// cross-row reduction adds the same values in the same sequence, which makes
// chain and EM output exactly equivariant under row permutations.
inline std::vector<std::size_t> row_order(std::size_t n,
                                          const std::vector<std::uint64_t>& ids) {
  std::vector<std::size_t> ord(n);
  for (std::size_t i = 0; i < n; ++i) ord[i] = i;
  if (!ids.empty()) {
    if (ids.size() != n) throw config_error("row stream label count mismatch");
    std::sort(ord.begin(), ord.end(),
              [&](std::size_t a, std::size_t b) { return ids[a] < ids[b]; });
  }
  return ord;
}

// Deterministic parallel E-step: row i of EM iteration t uses the substream
// keyed (seed, kEmRow, t, label_i), so results do not depend on the worker
// count or on row placement.
inline std::vector<Matrix> e_step_keyed(const Matrix& sigma_t, const TruncatedData& data,
                                        int D, std::uint64_t seed, std::uint64_t em_iter,
                                        int workers,
                                        const std::vector<std::uint64_t>& row_ids = {},
                                        std::vector<std::string>* warnings = nullptr) {
  if (D < 1) throw config_error("E-step replicate count D must be at least 1");
  Matrix precision = detail::robust_precision(sigma_t, warnings);
  Eigen::Index I = data.q_tilde.rows();
  if (!row_ids.empty() && static_cast<Eigen::Index>(row_ids.size()) != I)
    throw config_error("row stream label count mismatch");
  std::vector<Matrix> imputed(I);
  parallel_for(static_cast<std::size_t>(I), [&](std::size_t i) {
    std::uint64_t label = row_ids.empty() ? static_cast<std::uint64_t>(i) : row_ids[i];
    Rng rng = Rng::keyed(seed, stream::kEmRow, em_iter, label);
    imputed[i] = detail::impute_row(precision, data, static_cast<Eigen::Index>(i),
                                    D, rng);
  }, workers);
  return imputed;
}

namespace detail {
inline Matrix m_step_ordered(const std::vector<Matrix>& imputed,
                             const std::vector<std::size_t>& order, int workers) {
  if (imputed.empty()) throw config_error("m_step needs at least one sample");
  Eigen::Index J = imputed.front().cols();
  const std::size_t kBlock = 32;
  std::size_t n_rows = order.size();
  std::size_t n_blocks = (n_rows + kBlock - 1) / kBlock;
  std::vector<Matrix> partial(n_blocks, Matrix::Zero(J, J));
  parallel_for(n_blocks, [&](std::size_t b) {
    std::size_t lo = b * kBlock, hi = std::min(n_rows, lo + kBlock);
    Matrix acc = Matrix::Zero(J, J);
    for (std::size_t t = lo; t < hi; ++t)
      acc.noalias() += imputed[order[t]].transpose() * imputed[order[t]];
    partial[b] = std::move(acc);
  }, workers);
  Matrix total = Matrix::Zero(J, J);
  long long count = 0;
  for (const auto& p : partial) total += p;
  for (const auto& m : imputed) count += m.rows();
  return total / static_cast<double>(count);
}
}  // namespace detail

// Uncentered second-moment matrix over all imputed vectors; blockwise
// reduction in a fixed order, identical for every worker count.
inline Matrix m_step(const std::vector<Matrix>& imputed, int workers = -1) {
  return detail::m_step_ordered(imputed, row_order(imputed.size(), {}), workers);
}

struct EmSettings {
  int D = 50;
  double tol = 1e-3;
  int max_iter = 100;
  int workers = -1;
  // optional per-row RNG/reduction labels (see row_order)
  std::vector<std::uint64_t> row_stream_ids;
};

struct EmResult {
  GramMatrix S;
  bool converged = false;
  int iterations = 0;
  std::vector<double> step_norms;  // Frobenius change of the correlation per iteration
  std::vector<std::string> warnings;
};

// Self-consistent estimate of the correlation between sample columns,
// iterating truncated-normal imputation and moment re-estimation from
// Sigma_0 = I until the correlation stabilizes.
inline EmResult run_em(const CountTable& counts, const EmSettings& settings,
                       std::uint64_t seed) {
  counts.validate();
  EmResult result;
  TruncatedData data = make_truncated_data(counts, &result.warnings);
  Eigen::Index J = counts.n_samples();
  auto order = row_order(static_cast<std::size_t>(counts.n_otus()),
                         settings.row_stream_ids);
  Matrix sigma = Matrix::Identity(J, J);
  Matrix corr_prev = correlation_from_covariance(sigma);
  for (int t = 1; t <= settings.max_iter; ++t) {
    auto imputed = e_step_keyed(sigma, data, settings.D, seed,
                                static_cast<std::uint64_t>(t), settings.workers,
                                settings.row_stream_ids, &result.warnings);
    sigma = detail::m_step_ordered(imputed, order, settings.workers);
    Matrix corr = correlation_from_covariance(sigma);
    double step = (corr - corr_prev).norm();
    result.step_norms.push_back(step);
    result.iterations = t;
    corr_prev = corr;
    if (step < settings.tol) {
      result.converged = true;
      break;
    }
  }
  result.S = GramMatrix{correlation_from_covariance(sigma)};
  return result;
}

}  // namespace ddpf
