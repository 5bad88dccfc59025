#pragma once

#include <cerrno>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ddpf/em.hpp"
#include "ddpf/gibbs.hpp"
#include "ddpf/ordination.hpp"
#include "ddpf/types.hpp"

namespace ddpf {

using json = nlohmann::json;
namespace fs = std::filesystem;

// ----------------------------------------------------------------------
// Count-table TSV: header row of sample ids, first column of OTU ids,
// integer cells.
// ----------------------------------------------------------------------

namespace detail {
inline std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    std::size_t pos = line.find('\t', start);
    if (pos == std::string::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

inline bool parse_count_cell(const std::string& cell, long long& out) {
  if (cell.empty()) return false;
  std::size_t pos = 0;
  try {
    out = std::stoll(cell, &pos);
  } catch (...) {
    return false;
  }
  return pos == cell.size();
}
}  // namespace detail

inline CountTable load_counts(const std::string& path,
                              std::vector<std::string>* warnings = nullptr) {
  std::ifstream in(path);
  if (!in) throw data_error("cannot open count table: " + path);
  std::string line;
  if (!std::getline(in, line)) throw data_error(path + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  auto header = detail::split_tabs(line);
  if (header.size() < 2) throw data_error(path + ":1: header needs at least one sample column");
  std::vector<std::string> sample_ids(header.begin() + 1, header.end());
  std::size_t J = sample_ids.size();

  std::vector<std::string> otu_ids;
  std::vector<std::vector<long long>> rows;
  long long line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto cells = detail::split_tabs(line);
    if (cells.size() != J + 1)
      throw data_error(path + ":" + std::to_string(line_no) + ": ragged row, expected " +
                       std::to_string(J + 1) + " fields, got " + std::to_string(cells.size()));
    std::vector<long long> row(J);
    bool all_zero = true;
    for (std::size_t j = 0; j < J; ++j) {
      long long value;
      if (!detail::parse_count_cell(cells[j + 1], value))
        throw data_error(path + ":" + std::to_string(line_no) + ": non-integer cell '" +
                         cells[j + 1] + "'");
      if (value < 0)
        throw data_error(path + ":" + std::to_string(line_no) + ": negative count for OTU '" +
                         cells[0] + "' in sample '" + sample_ids[j] + "'");
      row[j] = value;
      if (value != 0) all_zero = false;
    }
    if (all_zero) {
      if (warnings)
        warnings->push_back("dropped all-zero OTU row '" + cells[0] + "' (line " +
                            std::to_string(line_no) + ")");
      continue;
    }
    otu_ids.push_back(cells[0]);
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw data_error(path + ": no usable OTU rows");

  CountTable table;
  table.otu_ids = std::move(otu_ids);
  table.sample_ids = std::move(sample_ids);
  table.counts.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(J));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < J; ++j)
      table.counts(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  for (std::size_t a = 0; a < table.otu_ids.size(); ++a)
    for (std::size_t b = a + 1; b < table.otu_ids.size(); ++b)
      if (table.otu_ids[a] == table.otu_ids[b])
        throw data_error(path + ": duplicate OTU id '" + table.otu_ids[a] + "'");
  for (std::size_t a = 0; a < table.sample_ids.size(); ++a)
    for (std::size_t b = a + 1; b < table.sample_ids.size(); ++b)
      if (table.sample_ids[a] == table.sample_ids[b])
        throw data_error(path + ": duplicate sample id '" + table.sample_ids[a] + "'");
  return table;
}

inline void save_counts(const CountTable& table, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw data_error("cannot write count table: " + path);
  out << "otu_id";
  for (const auto& s : table.sample_ids) out << '\t' << s;
  out << '\n';
  for (Eigen::Index i = 0; i < table.n_otus(); ++i) {
    out << table.otu_ids[i];
    for (Eigen::Index j = 0; j < table.n_samples(); ++j) out << '\t' << table.counts(i, j);
    out << '\n';
  }
}

// Generic numeric TSV with row/column labels (similarity matrices etc.).
inline void write_matrix_tsv(const std::string& path, const Matrix& m,
                             const std::vector<std::string>& row_ids,
                             const std::vector<std::string>& col_ids,
                             const std::string& corner = "id") {
  std::ofstream out(path);
  if (!out) throw data_error("cannot write matrix: " + path);
  out << corner;
  for (const auto& c : col_ids) out << '\t' << c;
  out << '\n';
  char buf[40];
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    out << row_ids[static_cast<std::size_t>(i)];
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", m(i, j));
      out << '\t' << buf;
    }
    out << '\n';
  }
}

inline Matrix read_matrix_tsv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw data_error("cannot open matrix: " + path);
  std::string line;
  if (!std::getline(in, line)) throw data_error(path + ": empty file");
  auto header = detail::split_tabs(line);
  std::size_t cols = header.size() - 1;
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto cells = detail::split_tabs(line);
    if (cells.size() != cols + 1) throw data_error(path + ": ragged matrix row");
    std::vector<double> row(cols);
    for (std::size_t j = 0; j < cols; ++j) row[j] = std::stod(cells[j + 1]);
    rows.push_back(std::move(row));
  }
  Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < cols; ++j)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  return m;
}

// ----------------------------------------------------------------------
// Draw archive: manifest.json plus a stream of length-prefixed records.
//
// Record layout (all little-endian):
//   u64 payload_bytes | u64 iteration | f64 sigma[I] | f64 Y[m*J] |
//   f64 S[J*J] | f64 P[I*J]
// Matrices are stored column-major. Records are flushed one by one, so an
// interrupted chain leaves a readable prefix.
// ----------------------------------------------------------------------

inline constexpr int kArchiveVersion = 1;

struct ArchiveManifest {
  int version = kArchiveVersion;
  Eigen::Index I = 0, J = 0;
  int m = 0;
  std::uint64_t seed = 0;
  long long planned_snapshots = 0;
  json settings;
  std::vector<std::string> otu_ids;
  std::vector<std::string> sample_ids;

  std::size_t payload_bytes() const {
    return sizeof(std::uint64_t) +
           sizeof(double) * static_cast<std::size_t>(I + m * J + J * J + I * J);
  }

  json to_json() const {
    return json{{"version", version}, {"I", I},
                {"J", J}, {"m", m},
                {"seed", seed}, {"planned_snapshots", planned_snapshots},
                {"settings", settings}, {"otu_ids", otu_ids},
                {"sample_ids", sample_ids}};
  }

  static ArchiveManifest from_json(const json& j) {
    ArchiveManifest m;
    m.version = j.at("version").get<int>();
    if (m.version != kArchiveVersion)
      throw archive_error("archive version mismatch: file has " +
                          std::to_string(m.version) + ", reader expects " +
                          std::to_string(kArchiveVersion));
    m.I = j.at("I").get<Eigen::Index>();
    m.J = j.at("J").get<Eigen::Index>();
    m.m = j.at("m").get<int>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.planned_snapshots = j.at("planned_snapshots").get<long long>();
    m.settings = j.at("settings");
    m.otu_ids = j.at("otu_ids").get<std::vector<std::string>>();
    m.sample_ids = j.at("sample_ids").get<std::vector<std::string>>();
    return m;
  }
};

class DrawArchiveWriter {
 public:
  DrawArchiveWriter(const std::string& dir, ArchiveManifest manifest)
      : manifest_(std::move(manifest)) {
    fs::create_directories(dir);
    std::ofstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw archive_error("cannot write manifest in " + dir);
    mf << manifest_.to_json().dump(2) << '\n';
    bin_.open(fs::path(dir) / "draws.bin", std::ios::binary | std::ios::trunc);
    if (!bin_) throw archive_error("cannot open draw stream in " + dir);
  }

  void write(const Snapshot& snap) {
    std::uint64_t payload = manifest_.payload_bytes();
    std::uint64_t iter = static_cast<std::uint64_t>(snap.iteration);
    bin_.write(reinterpret_cast<const char*>(&payload), sizeof(payload));
    bin_.write(reinterpret_cast<const char*>(&iter), sizeof(iter));
    auto put = [&](const double* data, std::size_t count) {
      bin_.write(reinterpret_cast<const char*>(data), sizeof(double) * count);
    };
    put(snap.sigma.data(), static_cast<std::size_t>(snap.sigma.size()));
    put(snap.Y.data(), static_cast<std::size_t>(snap.Y.size()));
    put(snap.S.data(), static_cast<std::size_t>(snap.S.size()));
    put(snap.P.data(), static_cast<std::size_t>(snap.P.size()));
    bin_.flush();
    if (!bin_) throw archive_error("draw stream write failed");
  }

  const ArchiveManifest& manifest() const { return manifest_; }

 private:
  ArchiveManifest manifest_;
  std::ofstream bin_;
};

struct LoadedDraws {
  PosteriorDraws draws;
  ArchiveManifest manifest;
  bool truncated = false;
};

inline LoadedDraws load_draws(const std::string& dir) {
  std::ifstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw archive_error("missing manifest in " + dir);
  json mj;
  try {
    mf >> mj;
  } catch (const json::exception& e) {
    throw archive_error(std::string("malformed manifest: ") + e.what());
  }
  LoadedDraws out;
  out.manifest = ArchiveManifest::from_json(mj);
  const auto& man = out.manifest;

  std::ifstream bin(fs::path(dir) / "draws.bin", std::ios::binary);
  if (!bin) throw archive_error("missing draw stream in " + dir);
  std::size_t expect = man.payload_bytes();
  out.draws.I = man.I;
  out.draws.J = man.J;
  out.draws.m = man.m;
  for (;;) {
    std::uint64_t payload = 0, iter = 0;
    bin.read(reinterpret_cast<char*>(&payload), sizeof(payload));
    if (bin.gcount() == 0) break;  // clean end
    if (bin.gcount() != sizeof(payload)) {
      out.truncated = true;
      break;
    }
    if (payload != expect)
      throw archive_error("record size " + std::to_string(payload) +
                          " does not match manifest dimensions (" +
                          std::to_string(expect) + ")");
    bin.read(reinterpret_cast<char*>(&iter), sizeof(iter));
    if (bin.gcount() != sizeof(iter)) {
      out.truncated = true;
      break;
    }
    Snapshot snap;
    snap.iteration = static_cast<long long>(iter);
    snap.sigma.resize(man.I);
    snap.Y.resize(man.m, man.J);
    snap.S.resize(man.J, man.J);
    snap.P.resize(man.I, man.J);
    auto get = [&](double* data, std::size_t count) {
      bin.read(reinterpret_cast<char*>(data), sizeof(double) * count);
      return bin.gcount() == static_cast<std::streamsize>(sizeof(double) * count);
    };
    if (!get(snap.sigma.data(), static_cast<std::size_t>(snap.sigma.size())) ||
        !get(snap.Y.data(), static_cast<std::size_t>(snap.Y.size())) ||
        !get(snap.S.data(), static_cast<std::size_t>(snap.S.size())) ||
        !get(snap.P.data(), static_cast<std::size_t>(snap.P.size()))) {
      out.truncated = true;
      break;
    }
    out.draws.draws.push_back(std::move(snap));
  }
  return out;
}

// ----------------------------------------------------------------------
// Output-directory lock
// ----------------------------------------------------------------------

class DirLock {
 public:
  explicit DirLock(const std::string& dir) : path_(fs::path(dir) / ".ddpf.lock") {
    fs::create_directories(dir);
    std::FILE* f = nullptr;
    if (fs::exists(path_))
      throw data_error("output directory is locked by another run: " + dir);
    f = std::fopen(path_.c_str(), "wx");
    if (!f) throw data_error("cannot acquire lock in " + dir);
    std::fclose(f);
  }
  ~DirLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  fs::path path_;
};

// ----------------------------------------------------------------------
// Run configuration
// ----------------------------------------------------------------------

struct OrdinationConfig {
  int d = 3;
  double level = 0.95;
  CompromiseMode mode = CompromiseMode::kMean;
  int subsample = 500;  // 0 keeps every draw
};

struct ClusterConfig {
  int k = 0;  // 0 selects k by average silhouette
};

struct RunConfig {
  std::string input;
  std::string output;
  Hyperparams hyper;
  EmSettings em;
  OrdinationConfig ordination;
  ClusterConfig cluster;
  bool export_csv = false;

  void validate_ranges() const {
    if (hyper.chain.iterations < 1) throw config_error("iterations must be positive");
    if (em.D < 1) throw config_error("em.D must be positive");
    if (em.tol <= 0.0) throw config_error("em.tol must be positive");
    if (em.max_iter < 1) throw config_error("em.max_iter must be positive");
    if (ordination.d < 1) throw config_error("ordination.d must be positive");
    if (!(ordination.level > 0.0 && ordination.level < 1.0))
      throw config_error("ordination.level must lie in (0,1)");
    if (ordination.subsample < 0) throw config_error("ordination.subsample must be >= 0");
    if (cluster.k < 0) throw config_error("cluster.k must be >= 0");
  }
};

namespace detail {
inline void reject_unknown_keys(const json& j, std::initializer_list<const char*> known,
                                const std::string& scope) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : known)
      if (it.key() == k) { ok = true; break; }
    if (!ok) throw config_error("unknown config key '" + scope + it.key() + "'");
  }
}
}  // namespace detail

inline RunConfig parse_config(const json& j) {
  RunConfig cfg;
  detail::reject_unknown_keys(
      j, {"input", "output", "seed", "hyper", "chain", "em", "ordination", "cluster",
          "export_csv"},
      "");
  if (j.contains("input")) cfg.input = j.at("input").get<std::string>();
  if (j.contains("output")) cfg.output = j.at("output").get<std::string>();
  if (j.contains("seed")) cfg.hyper.chain.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("hyper")) {
    const auto& h = j.at("hyper");
    detail::reject_unknown_keys(
        h, {"alpha", "m", "a1", "a2", "v", "tau_shape", "tau_rate"}, "hyper.");
    if (h.contains("alpha")) cfg.hyper.alpha = h.at("alpha").get<double>();
    if (h.contains("m")) cfg.hyper.m = h.at("m").get<int>();
    if (h.contains("a1")) cfg.hyper.a1 = h.at("a1").get<double>();
    if (h.contains("a2")) cfg.hyper.a2 = h.at("a2").get<double>();
    if (h.contains("v")) cfg.hyper.v = h.at("v").get<double>();
    if (h.contains("tau_shape")) cfg.hyper.tau_shape = h.at("tau_shape").get<double>();
    if (h.contains("tau_rate")) cfg.hyper.tau_rate = h.at("tau_rate").get<double>();
  }
  if (j.contains("chain")) {
    const auto& c = j.at("chain");
    detail::reject_unknown_keys(c, {"iterations", "burn_in", "thin", "seed"}, "chain.");
    if (c.contains("iterations"))
      cfg.hyper.chain.iterations = c.at("iterations").get<long long>();
    if (c.contains("burn_in")) cfg.hyper.chain.burn_in = c.at("burn_in").get<long long>();
    if (c.contains("thin")) cfg.hyper.chain.thin = c.at("thin").get<long long>();
    if (c.contains("seed")) cfg.hyper.chain.seed = c.at("seed").get<std::uint64_t>();
  }
  if (j.contains("em")) {
    const auto& e = j.at("em");
    detail::reject_unknown_keys(e, {"D", "tol", "max_iter"}, "em.");
    if (e.contains("D")) cfg.em.D = e.at("D").get<int>();
    if (e.contains("tol")) cfg.em.tol = e.at("tol").get<double>();
    if (e.contains("max_iter")) cfg.em.max_iter = e.at("max_iter").get<int>();
  }
  if (j.contains("ordination")) {
    const auto& o = j.at("ordination");
    detail::reject_unknown_keys(o, {"d", "level", "mode", "subsample"}, "ordination.");
    if (o.contains("d")) cfg.ordination.d = o.at("d").get<int>();
    if (o.contains("level")) cfg.ordination.level = o.at("level").get<double>();
    if (o.contains("mode")) {
      std::string mode = o.at("mode").get<std::string>();
      if (mode == "mean") cfg.ordination.mode = CompromiseMode::kMean;
      else if (mode == "rv") cfg.ordination.mode = CompromiseMode::kRvWeighted;
      else throw config_error("ordination.mode must be 'mean' or 'rv'");
    }
    if (o.contains("subsample")) cfg.ordination.subsample = o.at("subsample").get<int>();
  }
  if (j.contains("cluster")) {
    const auto& c = j.at("cluster");
    detail::reject_unknown_keys(c, {"k"}, "cluster.");
    if (c.contains("k")) cfg.cluster.k = c.at("k").get<int>();
  }
  if (j.contains("export_csv")) cfg.export_csv = j.at("export_csv").get<bool>();
  cfg.validate_ranges();
  return cfg;
}

inline json config_to_json(const RunConfig& cfg) {
  return json{
      {"input", cfg.input},
      {"output", cfg.output},
      {"hyper",
       {{"alpha", cfg.hyper.alpha}, {"m", cfg.hyper.m}, {"a1", cfg.hyper.a1},
        {"a2", cfg.hyper.a2}, {"v", cfg.hyper.v},
        {"tau_shape", cfg.hyper.tau_shape}, {"tau_rate", cfg.hyper.tau_rate}}},
      {"chain",
       {{"iterations", cfg.hyper.chain.iterations},
        {"burn_in", cfg.hyper.chain.burn_in}, {"thin", cfg.hyper.chain.thin},
        {"seed", cfg.hyper.chain.seed}}},
      {"em", {{"D", cfg.em.D}, {"tol", cfg.em.tol}, {"max_iter", cfg.em.max_iter}}},
      {"ordination",
       {{"d", cfg.ordination.d}, {"level", cfg.ordination.level},
        {"mode", cfg.ordination.mode == CompromiseMode::kMean ? "mean" : "rv"},
        {"subsample", cfg.ordination.subsample}}},
      {"cluster", {{"k", cfg.cluster.k}}},
      {"export_csv", cfg.export_csv}};
}

// Resolved-config echo so every output directory is reproducible alone.
inline void write_config_echo(const RunConfig& cfg, const std::string& dir) {
  std::ofstream out(fs::path(dir) / "config.json");
  if (!out) throw data_error("cannot write config echo in " + dir);
  out << config_to_json(cfg).dump(2) << '\n';
}

// ----------------------------------------------------------------------
// Structured ordination records (JSON lines)
// ----------------------------------------------------------------------

inline void write_projections_jsonl(const ProjectionCloud& cloud, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw data_error("cannot write projections: " + path);
  for (std::size_t j = 0; j < cloud.sample_ids.size(); ++j) {
    const Matrix& pts = cloud.draws[j];
    for (Eigen::Index k = 0; k < pts.rows(); ++k) {
      json rec{{"sample", cloud.sample_ids[j]}, {"draw", k}};
      std::vector<double> coords(pts.cols());
      for (Eigen::Index c = 0; c < pts.cols(); ++c) coords[static_cast<std::size_t>(c)] = pts(k, c);
      rec["coords"] = coords;
      out << rec.dump() << '\n';
    }
  }
}

inline void write_contours_jsonl(const ProjectionCloud& cloud, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw data_error("cannot write contours: " + path);
  for (std::size_t p = 0; p < cloud.axis_pairs.size(); ++p) {
    auto [r, s] = cloud.axis_pairs[p];
    for (std::size_t j = 0; j < cloud.sample_ids.size(); ++j) {
      json rec{{"sample", cloud.sample_ids[j]},
               {"level", cloud.level},
               {"axes", {r + 1, s + 1}}};
      std::vector<std::vector<double>> poly;
      for (const auto& v : cloud.polygons[p][j].vertices)
        poly.push_back({v.x(), v.y()});
      rec["polygon"] = poly;
      out << rec.dump() << '\n';
    }
  }
}

}  // namespace ddpf
