#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "ddpf/types.hpp"

namespace ddpf {

// Matrix correlation Tr(AB)/sqrt(Tr(AA) Tr(BB)).
inline double rv_coefficient(const Matrix& a, const Matrix& b) {
  if (a.rows() != a.cols() || b.rows() != b.cols() || a.rows() != b.rows())
    throw config_error("rv_coefficient needs square matrices of equal size");
  double na = a.squaredNorm(), nb = b.squaredNorm();
  if (!(na > 0.0) || !(nb > 0.0))
    throw config_error("rv_coefficient undefined for a zero matrix");
  return a.cwiseProduct(b).sum() / std::sqrt(na * nb);
}

enum class CompromiseMode { kMean, kRvWeighted };

// Summary Gram matrix of an ensemble: elementwise mean, or the STATIS
// compromise weighted by the leading eigenvector of the RV similarity
// matrix (nonnegative, normalized to sum 1).
inline Matrix compromise(const std::vector<Matrix>& s_list, CompromiseMode mode) {
  if (s_list.empty()) throw config_error("compromise needs at least one matrix");
  Eigen::Index J = s_list.front().rows();
  for (const auto& s : s_list)
    if (s.rows() != J || s.cols() != J)
      throw config_error("compromise inputs must share dimensions");
  std::size_t K = s_list.size();
  if (mode == CompromiseMode::kMean || K == 1) {
    Matrix acc = Matrix::Zero(J, J);
    for (const auto& s : s_list) acc += s;
    return acc / static_cast<double>(K);
  }
  Matrix rv(K, K);
  for (std::size_t k = 0; k < K; ++k) {
    rv(k, k) = 1.0;
    for (std::size_t l = k + 1; l < K; ++l) {
      double val = rv_coefficient(s_list[k], s_list[l]);
      rv(k, l) = val;
      rv(l, k) = val;
    }
  }
  Eigen::SelfAdjointEigenSolver<Matrix> es(rv);
  if (es.info() != Eigen::Success)
    throw decomposition_error("RV similarity eigendecomposition failed");
  Vector w = es.eigenvectors().col(K - 1);
  if (w.sum() < 0.0) w = -w;
  w = w.cwiseMax(0.0);
  double total = w.sum();
  if (!(total > 0.0)) throw decomposition_error("degenerate RV weights");
  w /= total;
  Matrix acc = Matrix::Zero(J, J);
  for (std::size_t k = 0; k < K; ++k) acc += w[static_cast<Eigen::Index>(k)] * s_list[k];
  return acc;
}

// Shared low-dimensional space: scaled eigenvectors v_r lambda_r^{-1/2} of
// the compromise, so projecting any Gram draw is a plain matrix product.
struct ConsensusSpace {
  Matrix axes;             // J x d, column r = v_r / sqrt(lambda_r)
  Vector eigenvalues;      // descending, positive
  Vector variance_ratios;  // lambda_r / trace(S0)
  std::vector<std::string> warnings;
};

inline ConsensusSpace consensus_axes(const GramMatrix& s0, int d) {
  Eigen::Index J = s0.S.rows();
  if (d < 1 || d > J) throw config_error("consensus dimension d must be in [1, J]");
  Eigen::SelfAdjointEigenSolver<Matrix> es(s0.S);
  if (es.info() != Eigen::Success)
    throw decomposition_error("compromise eigendecomposition failed");
  ConsensusSpace space;
  int usable = 0;
  for (int r = 0; r < d; ++r)
    if (es.eigenvalues()[J - 1 - r] > 0.0) ++usable;
  if (usable < d) {
    space.warnings.push_back("requested d=" + std::to_string(d) +
                             " but only " + std::to_string(usable) +
                             " positive eigenvalues; reducing");
    d = usable;
  }
  if (d < 1) throw decomposition_error("compromise has no positive eigenvalue");
  double trace = es.eigenvalues().sum();
  space.axes.resize(J, d);
  space.eigenvalues.resize(d);
  space.variance_ratios.resize(d);
  for (int r = 0; r < d; ++r) {
    double lambda = es.eigenvalues()[J - 1 - r];
    Vector v = es.eigenvectors().col(J - 1 - r);
    // deterministic sign: largest-magnitude coordinate positive
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v[arg] < 0.0) v = -v;
    space.axes.col(r) = v / std::sqrt(lambda);
    space.eigenvalues[r] = lambda;
    space.variance_ratios[r] = lambda / trace;
  }
  return space;
}

// psi^k = S_k * axes
inline Matrix project_draw(const Matrix& s_k, const ConsensusSpace& space) {
  if (s_k.rows() != space.axes.rows())
    throw config_error("Gram draw does not match consensus space dimension");
  return s_k * space.axes;
}

struct Polygon {
  std::vector<Eigen::Vector2d> vertices;  // closed implicitly

  double area() const {
    double acc = 0.0;
    std::size_t n = vertices.size();
    for (std::size_t i = 0; i < n; ++i) {
      const auto& p = vertices[i];
      const auto& q = vertices[(i + 1) % n];
      acc += p.x() * q.y() - q.x() * p.y();
    }
    return 0.5 * std::abs(acc);
  }

  bool contains(const Eigen::Vector2d& pt) const {
    bool inside = false;
    std::size_t n = vertices.size();
    for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
      const auto& a = vertices[i];
      const auto& b = vertices[j];
      if ((a.y() > pt.y()) != (b.y() > pt.y()) &&
          pt.x() < (b.x() - a.x()) * (pt.y() - a.y()) / (b.y() - a.y()) + a.x())
        inside = !inside;
    }
    return inside;
  }
};

namespace detail {

struct KdeGrid {
  int nx = 0, ny = 0;
  double x0 = 0, y0 = 0, dx = 0, dy = 0;
  std::vector<double> density;  // row-major, index = iy * nx + ix
  double at(int ix, int iy) const { return density[static_cast<std::size_t>(iy) * nx + ix]; }
  double gx(int ix) const { return x0 + ix * dx; }
  double gy(int iy) const { return y0 + iy * dy; }
};

inline double kde_value(const std::vector<Eigen::Vector2d>& pts, double hx, double hy,
                        double x, double y) {
  double acc = 0.0;
  for (const auto& p : pts) {
    double zx = (x - p.x()) / hx;
    double zy = (y - p.y()) / hy;
    double z2 = zx * zx + zy * zy;
    if (z2 < 80.0) acc += std::exp(-0.5 * z2);
  }
  return acc / (2.0 * M_PI * hx * hy * static_cast<double>(pts.size()));
}

// Marching squares with edge-keyed linking: endpoints live on unique grid
// edges, so chaining segments into loops is exact.
inline std::vector<Polygon> trace_contours(const KdeGrid& grid, double level) {
  struct Seg {
    long long e0, e1;
    Eigen::Vector2d p0, p1;
  };
  auto h_edge = [&](int ix, int iy) {
    return (static_cast<long long>(iy) * grid.nx + ix) * 2;
  };
  auto v_edge = [&](int ix, int iy) {
    return (static_cast<long long>(iy) * grid.nx + ix) * 2 + 1;
  };
  auto interp = [&](double f0, double f1, double c0, double c1) {
    double t = (level - f0) / (f1 - f0);
    return c0 + t * (c1 - c0);
  };
  std::vector<Seg> segs;
  for (int iy = 0; iy + 1 < grid.ny; ++iy) {
    for (int ix = 0; ix + 1 < grid.nx; ++ix) {
      double f00 = grid.at(ix, iy), f10 = grid.at(ix + 1, iy);
      double f01 = grid.at(ix, iy + 1), f11 = grid.at(ix + 1, iy + 1);
      int code = (f00 >= level ? 1 : 0) | (f10 >= level ? 2 : 0) |
                 (f11 >= level ? 4 : 0) | (f01 >= level ? 8 : 0);
      if (code == 0 || code == 15) continue;
      // crossing points on the four cell edges
      auto bottom = [&] {
        return std::pair<long long, Eigen::Vector2d>{
            h_edge(ix, iy),
            {interp(f00, f10, grid.gx(ix), grid.gx(ix + 1)), grid.gy(iy)}};
      };
      auto top = [&] {
        return std::pair<long long, Eigen::Vector2d>{
            h_edge(ix, iy + 1),
            {interp(f01, f11, grid.gx(ix), grid.gx(ix + 1)), grid.gy(iy + 1)}};
      };
      auto left = [&] {
        return std::pair<long long, Eigen::Vector2d>{
            v_edge(ix, iy),
            {grid.gx(ix), interp(f00, f01, grid.gy(iy), grid.gy(iy + 1))}};
      };
      auto right = [&] {
        return std::pair<long long, Eigen::Vector2d>{
            v_edge(ix + 1, iy),
            {grid.gx(ix + 1), interp(f10, f11, grid.gy(iy), grid.gy(iy + 1))}};
      };
      auto add = [&](const std::pair<long long, Eigen::Vector2d>& a,
                     const std::pair<long long, Eigen::Vector2d>& b) {
        segs.push_back({a.first, b.first, a.second, b.second});
      };
      switch (code) {
        case 1: case 14: add(left(), bottom()); break;
        case 2: case 13: add(bottom(), right()); break;
        case 3: case 12: add(left(), right()); break;
        case 4: case 11: add(right(), top()); break;
        case 6: case 9: add(bottom(), top()); break;
        case 7: case 8: add(left(), top()); break;
        case 5: {
          double center = 0.25 * (f00 + f10 + f01 + f11);
          if (center >= level) { add(left(), top()); add(right(), bottom()); }
          else { add(left(), bottom()); add(right(), top()); }
          break;
        }
        case 10: {
          double center = 0.25 * (f00 + f10 + f01 + f11);
          if (center >= level) { add(left(), bottom()); add(right(), top()); }
          else { add(left(), top()); add(right(), bottom()); }
          break;
        }
        default: break;
      }
    }
  }
  // chain segments into loops
  std::multimap<long long, std::size_t> by_edge;
  for (std::size_t s = 0; s < segs.size(); ++s) {
    by_edge.emplace(segs[s].e0, s);
    by_edge.emplace(segs[s].e1, s);
  }
  std::vector<bool> used(segs.size(), false);
  std::vector<Polygon> loops;
  for (std::size_t start = 0; start < segs.size(); ++start) {
    if (used[start]) continue;
    Polygon poly;
    used[start] = true;
    poly.vertices.push_back(segs[start].p0);
    poly.vertices.push_back(segs[start].p1);
    long long cursor = segs[start].e1;
    long long origin = segs[start].e0;
    while (cursor != origin) {
      auto range = by_edge.equal_range(cursor);
      std::size_t next = segs.size();
      for (auto it = range.first; it != range.second; ++it)
        if (!used[it->second]) { next = it->second; break; }
      if (next == segs.size()) break;  // open chain hitting the grid border
      used[next] = true;
      if (segs[next].e0 == cursor) {
        poly.vertices.push_back(segs[next].p1);
        cursor = segs[next].e1;
      } else {
        poly.vertices.push_back(segs[next].p0);
        cursor = segs[next].e0;
      }
    }
    if (poly.vertices.size() >= 3) loops.push_back(std::move(poly));
  }
  return loops;
}

}  // namespace detail

// Smallest KDE superlevel-set contour containing at least `level` of the
// points: product Scott bandwidths with a 1e-6 floor, 128x128 grid spanning
// the cloud plus three bandwidths, threshold at the density of the
// ceil(level*K)-th densest point. Returns the largest contour loop.
inline Polygon credible_region(const std::vector<Eigen::Vector2d>& points, double level) {
  if (points.size() < 10) throw config_error("credible_region needs at least 10 points");
  if (!(level > 0.0 && level < 1.0)) throw config_error("level must lie in (0,1)");
  const int kGrid = 128;
  std::size_t K = points.size();
  double mx = 0, my = 0;
  for (const auto& p : points) { mx += p.x(); my += p.y(); }
  mx /= static_cast<double>(K);
  my /= static_cast<double>(K);
  double vx = 0, vy = 0;
  double xmin = points[0].x(), xmax = xmin, ymin = points[0].y(), ymax = ymin;
  for (const auto& p : points) {
    vx += (p.x() - mx) * (p.x() - mx);
    vy += (p.y() - my) * (p.y() - my);
    xmin = std::min(xmin, p.x()); xmax = std::max(xmax, p.x());
    ymin = std::min(ymin, p.y()); ymax = std::max(ymax, p.y());
  }
  vx /= static_cast<double>(K - 1);
  vy /= static_cast<double>(K - 1);
  double scott = std::pow(static_cast<double>(K), -1.0 / 6.0);
  double hx = std::max(std::sqrt(vx) * scott, 1e-6);
  double hy = std::max(std::sqrt(vy) * scott, 1e-6);

  detail::KdeGrid grid;
  grid.nx = kGrid;
  grid.ny = kGrid;
  grid.x0 = xmin - 3.0 * hx;
  grid.y0 = ymin - 3.0 * hy;
  grid.dx = (xmax + 3.0 * hx - grid.x0) / (kGrid - 1);
  grid.dy = (ymax + 3.0 * hy - grid.y0) / (kGrid - 1);
  grid.density.resize(static_cast<std::size_t>(kGrid) * kGrid);
  for (int iy = 0; iy < kGrid; ++iy)
    for (int ix = 0; ix < kGrid; ++ix)
      grid.density[static_cast<std::size_t>(iy) * kGrid + ix] =
          detail::kde_value(points, hx, hy, grid.gx(ix), grid.gy(iy));

  std::vector<double> at_points(K);
  for (std::size_t k = 0; k < K; ++k)
    at_points[k] = detail::kde_value(points, hx, hy, points[k].x(), points[k].y());
  std::vector<double> sorted = at_points;
  std::sort(sorted.begin(), sorted.end(), std::greater<double>());
  std::size_t idx = static_cast<std::size_t>(
      std::ceil(level * static_cast<double>(K))) - 1;
  idx = std::min(idx, K - 1);
  double threshold = sorted[idx] * (1.0 - 1e-9);

  auto loops = detail::trace_contours(grid, threshold);
  if (loops.empty()) {
    // threshold above the whole grid: fall back to a box around the cloud
    Polygon box;
    box.vertices = {{xmin - hx, ymin - hy}, {xmax + hx, ymin - hy},
                    {xmax + hx, ymax + hy}, {xmin - hx, ymax + hy}};
    return box;
  }
  std::size_t best = 0;
  double best_area = -1.0;
  for (std::size_t l = 0; l < loops.size(); ++l) {
    double a = loops[l].area();
    if (a > best_area) { best_area = a; best = l; }
  }
  return loops[best];
}

// Per-sample projection clouds plus contour polygons in a fixed axis pair.
struct ProjectionCloud {
  std::vector<std::string> sample_ids;
  // draws[j] has one row per Gram draw, d columns
  std::vector<Matrix> draws;
  double level = 0.95;
  // polygons[pair_index][j]; axis pairs enumerate (r,s), r < s < d
  std::vector<std::pair<int, int>> axis_pairs;
  std::vector<std::vector<Polygon>> polygons;
};

inline ProjectionCloud build_projection_cloud(const std::vector<Matrix>& gram_draws,
                                              const ConsensusSpace& space,
                                              const std::vector<std::string>& sample_ids,
                                              double level) {
  if (gram_draws.empty()) throw config_error("no Gram draws to project");
  Eigen::Index J = gram_draws.front().rows();
  int d = static_cast<int>(space.axes.cols());
  ProjectionCloud cloud;
  cloud.sample_ids = sample_ids;
  cloud.level = level;
  cloud.draws.assign(J, Matrix(gram_draws.size(), d));
  for (std::size_t k = 0; k < gram_draws.size(); ++k) {
    Matrix psi = project_draw(gram_draws[k], space);
    for (Eigen::Index j = 0; j < J; ++j)
      cloud.draws[j].row(static_cast<Eigen::Index>(k)) = psi.row(j);
  }
  for (int r = 0; r < d; ++r)
    for (int s = r + 1; s < d; ++s) cloud.axis_pairs.emplace_back(r, s);
  cloud.polygons.resize(cloud.axis_pairs.size());
  for (std::size_t p = 0; p < cloud.axis_pairs.size(); ++p) {
    auto [r, s] = cloud.axis_pairs[p];
    cloud.polygons[p].resize(J);
    for (Eigen::Index j = 0; j < J; ++j) {
      std::vector<Eigen::Vector2d> pts;
      pts.reserve(gram_draws.size());
      for (Eigen::Index k = 0; k < cloud.draws[j].rows(); ++k)
        pts.emplace_back(cloud.draws[j](k, r), cloud.draws[j](k, s));
      cloud.polygons[p][j] = credible_region(pts, level);
    }
  }
  return cloud;
}

}  // namespace ddpf
