#pragma once

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "ddpf/ordination.hpp"
#include "ddpf/types.hpp"

namespace ddpf {

namespace detail {

inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.3f", v);
  return buf;
}

inline std::string fmt_pct(double ratio) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.1f%%", 100.0 * ratio);
  return buf;
}

inline const char* palette(std::size_t i) {
  static const char* colors[] = {"#1b6ca8", "#c0392b", "#27ae60", "#8e44ad",
                                 "#d35400", "#16a085", "#7f8c8d", "#2c3e50",
                                 "#e67e22", "#2980b9", "#a04000", "#1e8449"};
  return colors[i % (sizeof(colors) / sizeof(colors[0]))];
}

}  // namespace detail

// One pairwise-axis scatter of per-sample projection clouds with contour
// polygons and variance-ratio axis annotations. Output bytes are a pure
// function of the inputs.
inline void emit_ordination_figure(const ProjectionCloud& cloud,
                                   const ConsensusSpace& space,
                                   const std::vector<std::string>& labels,
                                   std::size_t pair_index, const std::string& path) {
  if (pair_index >= cloud.axis_pairs.size())
    throw config_error("axis pair index out of range");
  auto [ax, ay] = cloud.axis_pairs[pair_index];
  std::size_t J = cloud.sample_ids.size();
  if (!labels.empty() && labels.size() != J)
    throw config_error("label count must match sample count");

  const double width = 640.0, height = 640.0, margin = 60.0;
  double xmin = 0, xmax = 0, ymin = 0, ymax = 0;
  bool first = true;
  auto grow = [&](double x, double y) {
    if (first) {
      xmin = xmax = x;
      ymin = ymax = y;
      first = false;
    } else {
      xmin = std::min(xmin, x); xmax = std::max(xmax, x);
      ymin = std::min(ymin, y); ymax = std::max(ymax, y);
    }
  };
  for (std::size_t j = 0; j < J; ++j) {
    const Matrix& pts = cloud.draws[j];
    for (Eigen::Index k = 0; k < pts.rows(); ++k) grow(pts(k, ax), pts(k, ay));
    for (const auto& v : cloud.polygons[pair_index][j].vertices) grow(v.x(), v.y());
  }
  double spanx = std::max(xmax - xmin, 1e-9);
  double spany = std::max(ymax - ymin, 1e-9);
  auto px = [&](double x) { return margin + (x - xmin) / spanx * (width - 2 * margin); };
  auto py = [&](double y) { return height - margin - (y - ymin) / spany * (height - 2 * margin); };

  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("cannot write figure: " + path);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
      << "\" height=\"" << height << "\" viewBox=\"0 0 " << width << " " << height
      << "\">\n";
  out << "<rect x=\"0\" y=\"0\" width=\"" << width << "\" height=\"" << height
      << "\" fill=\"white\"/>\n";
  out << "<line x1=\"" << detail::fmt(margin) << "\" y1=\"" << detail::fmt(height - margin)
      << "\" x2=\"" << detail::fmt(width - margin) << "\" y2=\""
      << detail::fmt(height - margin) << "\" stroke=\"#444\" stroke-width=\"1\"/>\n";
  out << "<line x1=\"" << detail::fmt(margin) << "\" y1=\"" << detail::fmt(margin)
      << "\" x2=\"" << detail::fmt(margin) << "\" y2=\"" << detail::fmt(height - margin)
      << "\" stroke=\"#444\" stroke-width=\"1\"/>\n";
  out << "<text x=\"" << detail::fmt(width / 2) << "\" y=\"" << detail::fmt(height - 18.0)
      << "\" text-anchor=\"middle\" font-size=\"14\">Axis " << (ax + 1) << " ("
      << detail::fmt_pct(space.variance_ratios[ax]) << ")</text>\n";
  out << "<text x=\"18\" y=\"" << detail::fmt(height / 2)
      << "\" text-anchor=\"middle\" font-size=\"14\" transform=\"rotate(-90 18 "
      << detail::fmt(height / 2) << ")\">Axis " << (ay + 1) << " ("
      << detail::fmt_pct(space.variance_ratios[ay]) << ")</text>\n";

  for (std::size_t j = 0; j < J; ++j) {
    const char* color = detail::palette(j);
    const auto& poly = cloud.polygons[pair_index][j];
    out << "<polygon fill=\"" << color << "\" fill-opacity=\"0.12\" stroke=\"" << color
        << "\" stroke-width=\"1\" points=\"";
    for (std::size_t v = 0; v < poly.vertices.size(); ++v) {
      if (v) out << ' ';
      out << detail::fmt(px(poly.vertices[v].x())) << ','
          << detail::fmt(py(poly.vertices[v].y()));
    }
    out << "\"/>\n";
  }
  for (std::size_t j = 0; j < J; ++j) {
    const char* color = detail::palette(j);
    const Matrix& pts = cloud.draws[j];
    for (Eigen::Index k = 0; k < pts.rows(); ++k)
      out << "<circle cx=\"" << detail::fmt(px(pts(k, ax))) << "\" cy=\""
          << detail::fmt(py(pts(k, ay))) << "\" r=\"1.5\" fill=\"" << color
          << "\" fill-opacity=\"0.55\"/>\n";
  }
  for (std::size_t j = 0; j < J; ++j) {
    const Matrix& pts = cloud.draws[j];
    double mx = 0, my = 0;
    for (Eigen::Index k = 0; k < pts.rows(); ++k) {
      mx += pts(k, ax);
      my += pts(k, ay);
    }
    mx /= static_cast<double>(pts.rows());
    my /= static_cast<double>(pts.rows());
    const std::string& label = labels.empty() ? cloud.sample_ids[j] : labels[j];
    out << "<text x=\"" << detail::fmt(px(mx)) << "\" y=\"" << detail::fmt(py(my) - 4.0)
        << "\" text-anchor=\"middle\" font-size=\"10\" fill=\"#222\">" << label
        << "</text>\n";
  }
  out << "</svg>\n";
  if (!out) throw data_error("figure write failed: " + path);
}

}  // namespace ddpf
