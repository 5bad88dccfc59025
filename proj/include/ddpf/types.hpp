#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace ddpf {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using CountMatrix = Eigen::Matrix<long long, Eigen::Dynamic, Eigen::Dynamic>;

struct error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
// malformed input data or files
struct data_error : error {
  using error::error;
};
// invalid configuration / hyperparameters
struct config_error : error {
  using error::error;
};
// a sample column carries no positive latent weight
struct degenerate_column_error : error {
  using error::error;
};
// linear-algebra factorization failed (non-PD matrix etc.)
struct decomposition_error : error {
  using error::error;
};
// draw-archive format problems
struct archive_error : error {
  using error::error;
};

// I x J table of OTU read counts; rows are OTUs, columns biological samples.
struct CountTable {
  CountMatrix counts;
  std::vector<std::string> otu_ids;
  std::vector<std::string> sample_ids;

  Eigen::Index n_otus() const { return counts.rows(); }
  Eigen::Index n_samples() const { return counts.cols(); }

  long long column_total(Eigen::Index j) const { return counts.col(j).sum(); }
  long long row_total(Eigen::Index i) const { return counts.row(i).sum(); }

  void validate() const {
    if (counts.rows() < 1 || counts.cols() < 1)
      throw data_error("count table must have at least one OTU and one sample");
    if (static_cast<Eigen::Index>(otu_ids.size()) != counts.rows() ||
        static_cast<Eigen::Index>(sample_ids.size()) != counts.cols())
      throw data_error("count table labels do not match matrix dimensions");
    if ((counts.array() < 0).any())
      throw data_error("count table contains a negative entry");
    for (Eigen::Index j = 0; j < counts.cols(); ++j)
      if (column_total(j) < 1)
        throw data_error("sample column '" + sample_ids[j] + "' has zero total count");
    for (std::size_t a = 0; a < otu_ids.size(); ++a)
      for (std::size_t b = a + 1; b < otu_ids.size(); ++b)
        if (otu_ids[a] == otu_ids[b])
          throw data_error("duplicate OTU id: " + otu_ids[a]);
    for (std::size_t a = 0; a < sample_ids.size(); ++a)
      for (std::size_t b = a + 1; b < sample_ids.size(); ++b)
        if (sample_ids[a] == sample_ids[b])
          throw data_error("duplicate sample id: " + sample_ids[a]);
  }
};

struct ChainSettings {
  long long iterations = 50000;
  long long burn_in = 10000;
  long long thin = 10;
  std::uint64_t seed = 1;
};

struct Hyperparams {
  double alpha = 10.0;
  int m = 0;  // 0: resolve to min(J, 15) at fit time
  double a1 = 2.0;
  double a2 = 3.0;
  double v = 3.0;
  double tau_shape = 1.0;
  double tau_rate = 1.0;
  ChainSettings chain;

  double shrink_shape(int level) const { return level == 0 ? a1 : a2; }

  int resolve_m(Eigen::Index J) const {
    if (m > 0) return m;
    return static_cast<int>(std::min<Eigen::Index>(J, 15));
  }

  void validate(Eigen::Index I) const {
    if (alpha <= 0.0) throw config_error("alpha must be positive");
    if (I > 0 && alpha / static_cast<double>(I) >= 0.5)
      throw config_error("alpha/I must be below 1/2 for the fitted table");
    if (m < 0) throw config_error("factor truncation m must be nonnegative");
    if (a1 <= 0.0) throw config_error("a1 must be positive");
    if (a2 <= 1.0) throw config_error("a2 must exceed 1");
    if (v <= 0.0) throw config_error("v must be positive");
    if (tau_shape <= 0.0 || tau_rate <= 0.0)
      throw config_error("tau prior parameters must be positive");
    if (chain.thin < 1) throw config_error("thin must be at least 1");
    if (chain.burn_in < 0) throw config_error("burn_in must be nonnegative");
    if (chain.burn_in >= chain.iterations)
      throw config_error("burn_in must be below iterations");
  }
};

// Current MCMC values of the truncated process.
struct LatentState {
  Vector sigma;  // length I, entries in (0,1)
  Matrix Q;      // I x J
  Vector T;      // length J, positive
};

// Shrinkage-prior factor block: X is m x I, Y is m x J.
struct FactorState {
  Matrix X;
  Matrix Y;
  Vector gamma;        // length m, global shrinkage increments
  Matrix gamma_local;  // m x J local shrinkage
  double tau_eps = 1.0;

  // cumulative products prod_{k<=l} gamma_k
  Vector gamma_cumprod() const {
    Vector out(gamma.size());
    double acc = 1.0;
    for (Eigen::Index l = 0; l < gamma.size(); ++l) {
      acc *= gamma[l];
      out[l] = acc;
    }
    return out;
  }
};

// J x J normalized similarity between biological samples.
struct GramMatrix {
  Matrix S;

  void validate(double psd_tol = 1e-8) const {
    if (S.rows() != S.cols()) throw data_error("Gram matrix must be square");
    for (Eigen::Index i = 0; i < S.rows(); ++i) {
      if (std::abs(S(i, i) - 1.0) > 1e-8)
        throw data_error("Gram matrix diagonal must be 1");
      for (Eigen::Index j = i + 1; j < S.cols(); ++j)
        if (std::abs(S(i, j) - S(j, i)) > 1e-10)
          throw data_error("Gram matrix must be symmetric");
    }
    Eigen::SelfAdjointEigenSolver<Matrix> es(S, Eigen::EigenvaluesOnly);
    if (es.eigenvalues().minCoeff() < -psd_tol)
      throw data_error("Gram matrix is not numerically PSD");
  }
};

// Columns live on the (I-1)-simplex.
struct DistributionSet {
  Matrix P;
};

}  // namespace ddpf
