#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "ddpf/gibbs.hpp"
#include "ddpf/parallel.hpp"
#include "ddpf/types.hpp"

namespace ddpf {

// Columnwise average of the P snapshots, renormalized against rounding drift.
inline DistributionSet posterior_mean_P(const PosteriorDraws& draws) {
  if (draws.draws.empty()) throw config_error("posterior_mean_P needs at least one draw");
  Matrix acc = Matrix::Zero(draws.draws.front().P.rows(), draws.draws.front().P.cols());
  for (const auto& snap : draws.draws) acc += snap.P;
  acc /= static_cast<double>(draws.draws.size());
  for (Eigen::Index j = 0; j < acc.cols(); ++j) acc.col(j) /= acc.col(j).sum();
  return DistributionSet{std::move(acc)};
}

inline DistributionSet empirical_P(const CountTable& counts) {
  Eigen::Index I = counts.n_otus(), J = counts.n_samples();
  Matrix p(I, J);
  for (Eigen::Index j = 0; j < J; ++j) {
    long long total = counts.column_total(j);
    if (total <= 0)
      throw data_error("sample column " + std::to_string(j) + " has zero total count");
    for (Eigen::Index i = 0; i < I; ++i)
      p(i, j) = static_cast<double>(counts.counts(i, j)) / static_cast<double>(total);
  }
  return DistributionSet{std::move(p)};
}

inline double total_variation(const Vector& p, const Vector& q) {
  if (p.size() != q.size()) throw config_error("total_variation needs equal lengths");
  return 0.5 * (p - q).cwiseAbs().sum();
}

inline double bray_curtis(const Vector& p, const Vector& q) {
  if (p.size() != q.size()) throw config_error("bray_curtis needs equal lengths");
  return 1.0 - p.cwiseMin(q).sum();
}

inline Matrix bray_curtis_matrix(const DistributionSet& dist) {
  Eigen::Index J = dist.P.cols();
  Matrix d = Matrix::Zero(J, J);
  for (Eigen::Index a = 0; a < J; ++a)
    for (Eigen::Index b = a + 1; b < J; ++b) {
      double val = bray_curtis(dist.P.col(a), dist.P.col(b));
      d(a, b) = val;
      d(b, a) = val;
    }
  return d;
}

// ----------------------------------------------------------------------
// Partitioning Around Medoids: greedy BUILD, steepest-descent SWAP, ties
// broken toward the lowest index so the result is deterministic.
// ----------------------------------------------------------------------

namespace detail {

inline double pam_cost(const Matrix& dist, const std::vector<Eigen::Index>& medoids) {
  double cost = 0.0;
  for (Eigen::Index i = 0; i < dist.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index m : medoids) best = std::min(best, dist(i, m));
    cost += best;
  }
  return cost;
}

}  // namespace detail

struct PamResult {
  std::vector<int> labels;             // cluster index per point
  std::vector<Eigen::Index> medoids;   // sorted point indices
  double build_cost = 0.0;
  double swap_cost = 0.0;
};

inline PamResult pam_cluster(const Matrix& dist, int k) {
  Eigen::Index J = dist.rows();
  if (dist.cols() != J) throw config_error("PAM needs a square dissimilarity matrix");
  if (k < 1 || k > J) throw config_error("PAM cluster count k must be in [1, J]");
  for (Eigen::Index i = 0; i < J; ++i) {
    if (std::abs(dist(i, i)) > 1e-12)
      throw config_error("PAM dissimilarity diagonal must be zero");
    for (Eigen::Index j = i + 1; j < J; ++j)
      if (dist(i, j) < 0.0 || std::abs(dist(i, j) - dist(j, i)) > 1e-12)
        throw config_error("PAM dissimilarity must be symmetric and nonnegative");
  }

  std::vector<Eigen::Index> medoids;
  std::vector<bool> is_medoid(J, false);

  // BUILD
  {
    Eigen::Index best = 0;
    double best_cost = std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < J; ++c) {
      double cost = dist.col(c).sum();
      if (cost < best_cost) { best_cost = cost; best = c; }
    }
    medoids.push_back(best);
    is_medoid[best] = true;
  }
  std::vector<double> nearest(J);
  auto refresh_nearest = [&] {
    for (Eigen::Index i = 0; i < J; ++i) {
      double bestd = std::numeric_limits<double>::infinity();
      for (Eigen::Index m : medoids) bestd = std::min(bestd, dist(i, m));
      nearest[i] = bestd;
    }
  };
  refresh_nearest();
  while (static_cast<int>(medoids.size()) < k) {
    Eigen::Index best = -1;
    double best_gain = -std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < J; ++c) {
      if (is_medoid[c]) continue;
      double gain = 0.0;
      for (Eigen::Index i = 0; i < J; ++i)
        gain += std::max(0.0, nearest[i] - dist(i, c));
      if (gain > best_gain) { best_gain = gain; best = c; }
    }
    medoids.push_back(best);
    is_medoid[best] = true;
    refresh_nearest();
  }
  double build_cost = detail::pam_cost(dist, medoids);

  // SWAP
  double current = build_cost;
  for (;;) {
    double best_delta = -1e-12;
    Eigen::Index best_m = -1, best_h = -1;
    for (std::size_t mi = 0; mi < medoids.size(); ++mi) {
      for (Eigen::Index h = 0; h < J; ++h) {
        if (is_medoid[h]) continue;
        std::vector<Eigen::Index> trial = medoids;
        trial[mi] = h;
        double delta = detail::pam_cost(dist, trial) - current;
        if (delta < best_delta) {
          best_delta = delta;
          best_m = static_cast<Eigen::Index>(mi);
          best_h = h;
        }
      }
    }
    if (best_m < 0) break;
    is_medoid[medoids[best_m]] = false;
    medoids[best_m] = best_h;
    is_medoid[best_h] = true;
    current += best_delta;
  }

  PamResult result;
  std::sort(medoids.begin(), medoids.end());
  result.medoids = medoids;
  result.build_cost = build_cost;
  result.swap_cost = current;
  result.labels.resize(J);
  for (Eigen::Index i = 0; i < J; ++i) {
    int best_label = 0;
    double bestd = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < medoids.size(); ++c) {
      if (dist(i, medoids[c]) < bestd) {
        bestd = dist(i, medoids[c]);
        best_label = static_cast<int>(c);
      }
    }
    result.labels[i] = best_label;
  }
  return result;
}

// Average silhouette width of a labeling under a dissimilarity matrix;
// singleton clusters score zero.
inline double silhouette(const Matrix& dist, const std::vector<int>& labels) {
  Eigen::Index J = dist.rows();
  if (static_cast<Eigen::Index>(labels.size()) != J)
    throw config_error("labels length must match dissimilarity size");
  int k = *std::max_element(labels.begin(), labels.end()) + 1;
  std::vector<long long> sizes(k, 0);
  for (int l : labels) ++sizes[l];
  double acc = 0.0;
  for (Eigen::Index i = 0; i < J; ++i) {
    std::vector<double> mean_to(k, 0.0);
    for (Eigen::Index j = 0; j < J; ++j)
      if (j != i) mean_to[labels[j]] += dist(i, j);
    int own = labels[i];
    if (sizes[own] <= 1) continue;  // silhouette 0 for singletons
    double a = mean_to[own] / static_cast<double>(sizes[own] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (int c = 0; c < k; ++c) {
      if (c == own || sizes[c] == 0) continue;
      b = std::min(b, mean_to[c] / static_cast<double>(sizes[c]));
    }
    if (!std::isfinite(b)) continue;
    acc += (b - a) / std::max(a, b);
  }
  return acc / static_cast<double>(J);
}

// Default cluster count: the k in {2, ..., min(10, J-1)} maximizing average
// silhouette width on the given dissimilarity matrix.
inline int choose_k(const Matrix& dist) {
  Eigen::Index J = dist.rows();
  int kmax = static_cast<int>(std::min<Eigen::Index>(10, J - 1));
  if (kmax < 2) return 1;
  int best_k = 2;
  double best_sil = -std::numeric_limits<double>::infinity();
  for (int k = 2; k <= kmax; ++k) {
    auto pam = pam_cluster(dist, k);
    double sil = silhouette(dist, pam.labels);
    if (sil > best_sil) { best_sil = sil; best_k = k; }
  }
  return best_k;
}

struct CoclusterMatrix {
  Matrix probs;  // J x J in [0,1], symmetric, unit diagonal
};

// Posterior co-clustering probabilities: per draw, Bray-Curtis of that
// draw's P and a PAM partition; entries average co-membership over draws.
// Per-draw work is parallel; the reduction runs over fixed blocks so the
// result is worker-count independent.
inline CoclusterMatrix cocluster(const PosteriorDraws& draws, int k, int workers = -1) {
  if (draws.draws.empty()) throw config_error("cocluster needs at least one draw");
  Eigen::Index J = draws.draws.front().P.cols();
  std::size_t K = draws.draws.size();
  const std::size_t kBlock = 8;
  std::size_t n_blocks = (K + kBlock - 1) / kBlock;
  std::vector<Matrix> partial(n_blocks);
  parallel_for(n_blocks, [&](std::size_t b) {
    Matrix acc = Matrix::Zero(J, J);
    std::size_t lo = b * kBlock, hi = std::min(K, lo + kBlock);
    for (std::size_t d = lo; d < hi; ++d) {
      DistributionSet p{draws.draws[d].P};
      Matrix bc = bray_curtis_matrix(p);
      auto pam = pam_cluster(bc, k);
      for (Eigen::Index x = 0; x < J; ++x)
        for (Eigen::Index y = 0; y < J; ++y)
          if (pam.labels[x] == pam.labels[y]) acc(x, y) += 1.0;
    }
    partial[b] = std::move(acc);
  }, workers);
  Matrix total = Matrix::Zero(J, J);
  for (const auto& p : partial) total += p;
  total /= static_cast<double>(K);
  return CoclusterMatrix{std::move(total)};
}

}  // namespace ddpf
