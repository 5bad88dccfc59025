#pragma once

#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ddpf/downstream.hpp"
#include "ddpf/em.hpp"
#include "ddpf/gibbs.hpp"
#include "ddpf/io.hpp"
#include "ddpf/model.hpp"
#include "ddpf/ordination.hpp"
#include "ddpf/svg.hpp"
#include "ddpf/types.hpp"

namespace ddpf {

namespace cli_detail {

inline std::string rep_name(const std::string& stem, int rep, const std::string& ext) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%02d", rep);
  return stem + "_rep" + buf + ext;
}

struct SimArgs {
  std::string out;
  long long I = 68, J = 22, L = 3;
  long long total = 1000;
  std::string design = "blocks";
  double theta = 0.5;
  double power = 2.0;
  double alpha = 10.0;
  int replicates = 1;
  std::uint64_t seed = 1;
};

// One synthetic dataset: latent factors per design, stick weights from the
// prior, per-column multinomials with fixed totals. Returns truth alongside.
struct SimReplicate {
  CountTable counts;
  Matrix s_true;
  DistributionSet p_true;
  std::vector<int> group_labels;
};

inline SimReplicate simulate_replicate(const SimArgs& args, int rep) {
  FactorDesign design;
  if (args.design == "blocks") design = FactorDesign::kBlocks;
  else if (args.design == "theta") design = FactorDesign::kEquicorrelated;
  else if (args.design == "clusters") design = FactorDesign::kTwoClusters;
  else throw config_error("unknown design '" + args.design + "'");

  for (std::uint64_t attempt = 0;; ++attempt) {
    Rng rng = Rng::keyed(args.seed, stream::kSimulate, static_cast<std::uint64_t>(rep),
                         attempt);
    Matrix Y = make_design_factors(design, args.L, args.J, args.theta, rng);
    Matrix X(args.L, args.I);
    for (Eigen::Index l = 0; l < X.rows(); ++l)
      for (Eigen::Index i = 0; i < X.cols(); ++i) X(l, i) = rng.normal();
    Vector sigma = sample_prior_sigma(args.I, args.alpha, rng);
    DistributionSet P;
    try {
      P = simulate_misspecified(sigma, X, Y, args.power);
    } catch (const degenerate_column_error&) {
      continue;  // some column drew no positive weight; redraw everything
    }
    SimReplicate out;
    out.p_true = P;
    out.s_true = normalized_gram(Y).S;
    std::vector<long long> totals(static_cast<std::size_t>(args.J), args.total);
    out.counts = simulate_dataset(P, totals, rng);
    if (design == FactorDesign::kTwoClusters) {
      out.group_labels.resize(static_cast<std::size_t>(args.J));
      for (Eigen::Index j = 0; j < args.J; ++j)
        out.group_labels[static_cast<std::size_t>(j)] = j < args.J / 2 ? 0 : 1;
    }
    return out;
  }
}

inline int run_simulate(const SimArgs& args) {
  fs::create_directories(args.out);
  DirLock lock(args.out);
  for (int rep = 1; rep <= args.replicates; ++rep) {
    SimReplicate sim = simulate_replicate(args, rep);
    save_counts(sim.counts, (fs::path(args.out) / rep_name("counts", rep, ".tsv")).string());
    write_matrix_tsv((fs::path(args.out) / rep_name("S_true", rep, ".tsv")).string(),
                     sim.s_true, sim.counts.sample_ids, sim.counts.sample_ids, "sample");
    write_matrix_tsv((fs::path(args.out) / rep_name("P_true", rep, ".tsv")).string(),
                     sim.p_true.P, sim.counts.otu_ids, sim.counts.sample_ids, "otu_id");
    if (!sim.group_labels.empty()) {
      std::ofstream lf(fs::path(args.out) / rep_name("labels", rep, ".tsv"));
      lf << "sample\tgroup\n";
      for (std::size_t j = 0; j < sim.group_labels.size(); ++j)
        lf << sim.counts.sample_ids[j] << '\t' << sim.group_labels[j] << '\n';
    }
  }
  json meta{{"I", args.I}, {"J", args.J}, {"L", args.L}, {"total", args.total},
            {"design", args.design}, {"theta", args.theta}, {"power", args.power},
            {"alpha", args.alpha}, {"replicates", args.replicates}, {"seed", args.seed}};
  std::ofstream mf(fs::path(args.out) / "sim_meta.json");
  mf << meta.dump(2) << '\n';
  std::cout << "simulate: wrote " << args.replicates << " replicate(s) to " << args.out
            << "\n";
  return 0;
}

inline json diagnostics_to_json(const ChainDiagnostics& diag) {
  json bins = json::array();
  for (const auto& b : diag.acceptance_bins)
    bins.push_back(json{{"lo", b.lo}, {"hi", b.hi}, {"proposals", b.proposals},
                        {"accepted", b.accepted}, {"rate", b.rate()}});
  json traces;
  for (const auto& [name, t] : diag.traces)
    traces[name] = json{{"mean", t.mean}, {"variance", t.variance},
                        {"lag1_autocorr", t.lag1_autocorr}};
  return json{{"mh_acceptance_rate", diag.mh_acceptance_rate},
              {"acceptance_bins", bins}, {"traces", traces}};
}

inline int run_fit(const RunConfig& cfg, int workers) {
  fs::create_directories(cfg.output);
  DirLock lock(cfg.output);
  std::vector<std::string> warnings;
  CountTable counts = load_counts(cfg.input, &warnings);
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
  counts.validate();
  Hyperparams hyper = cfg.hyper;
  hyper.validate(counts.n_otus());

  ArchiveManifest manifest;
  manifest.I = counts.n_otus();
  manifest.J = counts.n_samples();
  manifest.m = hyper.resolve_m(counts.n_samples());
  manifest.seed = hyper.chain.seed;
  manifest.planned_snapshots = expected_snapshots(hyper.chain);
  manifest.settings = config_to_json(cfg);
  manifest.otu_ids = counts.otu_ids;
  manifest.sample_ids = counts.sample_ids;
  DrawArchiveWriter writer(cfg.output, manifest);

  std::ofstream csv_sigma, csv_s;
  if (cfg.export_csv) {
    csv_sigma.open(fs::path(cfg.output) / "sigma.csv");
    csv_s.open(fs::path(cfg.output) / "S.csv");
  }
  auto csv_row = [](std::ofstream& out, long long iter, const double* data,
                    std::size_t n) {
    out << iter;
    char buf[40];
    for (std::size_t i = 0; i < n; ++i) {
      std::snprintf(buf, sizeof(buf), "%.17g", data[i]);
      out << ',' << buf;
    }
    out << '\n';
  };

  ChainOptions options;
  options.workers = workers;
  options.keep_draws = false;
  options.em_init = cfg.em;
  options.sink = [&](const Snapshot& snap) {
    writer.write(snap);
    if (cfg.export_csv) {
      csv_row(csv_sigma, snap.iteration, snap.sigma.data(),
              static_cast<std::size_t>(snap.sigma.size()));
      csv_row(csv_s, snap.iteration, snap.S.data(),
              static_cast<std::size_t>(snap.S.size()));
    }
  };

  auto [draws, diag] = run_chain(counts, hyper, options);
  std::ofstream df(fs::path(cfg.output) / "diagnostics.json");
  df << diagnostics_to_json(diag).dump(2) << '\n';
  write_config_echo(cfg, cfg.output);
  std::cout << "fit: " << manifest.planned_snapshots << " snapshots archived in "
            << cfg.output << " (MH acceptance "
            << diag.mh_acceptance_rate << ")\n";
  return 0;
}

inline int run_init_em(const RunConfig& cfg, int workers) {
  fs::create_directories(cfg.output);
  DirLock lock(cfg.output);
  std::vector<std::string> warnings;
  CountTable counts = load_counts(cfg.input, &warnings);
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
  EmSettings settings = cfg.em;
  settings.workers = workers;
  EmResult em = run_em(counts, settings, cfg.hyper.chain.seed);
  for (const auto& w : em.warnings) std::cerr << "warning: " << w << "\n";
  write_matrix_tsv((fs::path(cfg.output) / "S_em.tsv").string(), em.S.S,
                   counts.sample_ids, counts.sample_ids, "sample");
  json meta{{"converged", em.converged}, {"iterations", em.iterations},
            {"step_norms", em.step_norms}};
  std::ofstream mf(fs::path(cfg.output) / "em_meta.json");
  mf << meta.dump(2) << '\n';
  write_config_echo(cfg, cfg.output);
  std::cout << "init-em: " << (em.converged ? "converged" : "max iterations reached")
            << " after " << em.iterations << " iteration(s)\n";
  return 0;
}

// Evenly spaced subsample of draw indices, deterministic.
inline std::vector<std::size_t> subsample_indices(std::size_t total, int target) {
  std::vector<std::size_t> idx;
  if (target <= 0 || static_cast<std::size_t>(target) >= total) {
    idx.resize(total);
    for (std::size_t i = 0; i < total; ++i) idx[i] = i;
    return idx;
  }
  idx.reserve(static_cast<std::size_t>(target));
  for (int t = 0; t < target; ++t)
    idx.push_back(static_cast<std::size_t>(
        (static_cast<unsigned long long>(t) * total) / static_cast<unsigned long long>(target)));
  return idx;
}

inline int run_ordinate(const std::string& archive_dir, const RunConfig& cfg) {
  fs::create_directories(cfg.output);
  DirLock lock(cfg.output);
  LoadedDraws loaded = load_draws(archive_dir);
  if (loaded.truncated)
    std::cerr << "warning: draw archive is truncated; using the readable prefix\n";
  if (loaded.draws.draws.empty()) throw data_error("draw archive holds no snapshots");

  auto idx = subsample_indices(loaded.draws.draws.size(), cfg.ordination.subsample);
  std::vector<Matrix> gram_draws;
  gram_draws.reserve(idx.size());
  for (std::size_t i : idx) gram_draws.push_back(loaded.draws.draws[i].S);

  Matrix s0 = compromise(gram_draws, cfg.ordination.mode);
  ConsensusSpace space = consensus_axes(GramMatrix{s0}, cfg.ordination.d);
  for (const auto& w : space.warnings) std::cerr << "warning: " << w << "\n";
  ProjectionCloud cloud = build_projection_cloud(gram_draws, space,
                                                 loaded.manifest.sample_ids,
                                                 cfg.ordination.level);

  for (std::size_t p = 0; p < cloud.axis_pairs.size(); ++p) {
    auto [r, s] = cloud.axis_pairs[p];
    std::string name = "fig_axes_" + std::to_string(r + 1) + "_" + std::to_string(s + 1) +
                       ".svg";
    emit_ordination_figure(cloud, space, loaded.manifest.sample_ids, p,
                           (fs::path(cfg.output) / name).string());
  }
  write_projections_jsonl(cloud, (fs::path(cfg.output) / "projections.jsonl").string());
  write_contours_jsonl(cloud, (fs::path(cfg.output) / "contours.jsonl").string());
  write_matrix_tsv((fs::path(cfg.output) / "S_compromise.tsv").string(), s0,
                   loaded.manifest.sample_ids, loaded.manifest.sample_ids, "sample");
  json meta{{"eigenvalues", std::vector<double>(space.eigenvalues.data(),
                                                space.eigenvalues.data() + space.eigenvalues.size())},
            {"variance_ratios",
             std::vector<double>(space.variance_ratios.data(),
                                 space.variance_ratios.data() + space.variance_ratios.size())},
            {"draws_used", idx.size()},
            {"level", cfg.ordination.level},
            {"mode", cfg.ordination.mode == CompromiseMode::kMean ? "mean" : "rv"}};
  std::ofstream mf(fs::path(cfg.output) / "consensus.json");
  mf << meta.dump(2) << '\n';
  write_config_echo(cfg, cfg.output);
  std::cout << "ordinate: " << cloud.axis_pairs.size() << " figure(s) from "
            << idx.size() << " draws\n";
  return 0;
}

inline int run_cluster(const std::string& archive_dir, const RunConfig& cfg, int workers) {
  fs::create_directories(cfg.output);
  DirLock lock(cfg.output);
  LoadedDraws loaded = load_draws(archive_dir);
  if (loaded.draws.draws.empty()) throw data_error("draw archive holds no snapshots");

  DistributionSet mean_p = posterior_mean_P(loaded.draws);
  Matrix mean_bc = bray_curtis_matrix(mean_p);
  int k = cfg.cluster.k;
  if (k == 0) k = choose_k(mean_bc);
  CoclusterMatrix cc = cocluster(loaded.draws, k, workers);
  auto pam = pam_cluster(mean_bc, k);

  const auto& ids = loaded.manifest.sample_ids;
  write_matrix_tsv((fs::path(cfg.output) / "cocluster.tsv").string(), cc.probs, ids, ids,
                   "sample");
  std::ofstream lf(fs::path(cfg.output) / "labels.tsv");
  lf << "sample\tcluster\n";
  for (std::size_t j = 0; j < ids.size(); ++j)
    lf << ids[j] << '\t' << pam.labels[j] << '\n';
  json meta{{"k", k}, {"silhouette", silhouette(mean_bc, pam.labels)},
            {"draws_used", loaded.draws.draws.size()}};
  std::ofstream mf(fs::path(cfg.output) / "cluster_meta.json");
  mf << meta.dump(2) << '\n';
  write_config_echo(cfg, cfg.output);
  std::cout << "cluster: k=" << k << " over " << loaded.draws.draws.size() << " draws\n";
  return 0;
}

inline int run_diagnose(const std::string& archive_dir, const std::string& out_dir,
                        int tv_max_k) {
  fs::create_directories(out_dir);
  DirLock lock(out_dir);
  {
    std::ofstream tf(fs::path(out_dir) / "tv_bound.tsv");
    tf << "k\ttv_bound\n";
    char buf[40];
    for (int k = 1; k <= tv_max_k; ++k) {
      std::snprintf(buf, sizeof(buf), "%.12g", tv_bound(k));
      tf << k << '\t' << buf << '\n';
    }
  }
  LoadedDraws loaded = load_draws(archive_dir);
  std::vector<double> sigma_mean, top_ratio;
  for (const auto& snap : loaded.draws.draws) {
    sigma_mean.push_back(snap.sigma.mean());
    Eigen::SelfAdjointEigenSolver<Matrix> es(snap.S, Eigen::EigenvaluesOnly);
    top_ratio.push_back(es.eigenvalues().maxCoeff() / snap.S.trace());
  }
  json traces;
  auto put = [&](const std::string& name, const std::vector<double>& x) {
    TraceSummary t = summarize_trace(x);
    traces[name] = json{{"mean", t.mean}, {"variance", t.variance},
                        {"lag1_autocorr", t.lag1_autocorr}};
  };
  put("sigma_mean", sigma_mean);
  put("top_eigenvalue_ratio", top_ratio);
  json report{{"snapshots", loaded.draws.draws.size()},
              {"truncated", loaded.truncated}, {"traces", traces}};
  fs::path fit_diag = fs::path(archive_dir) / "diagnostics.json";
  if (fs::exists(fit_diag)) {
    std::ifstream df(fit_diag);
    json fit_json;
    df >> fit_json;
    report["fit"] = fit_json;
  }
  std::ofstream rf(fs::path(out_dir) / "diagnose.json");
  rf << report.dump(2) << '\n';
  std::cout << "diagnose: tv_bound table up to k=" << tv_max_k << ", "
            << loaded.draws.draws.size() << " snapshots summarized\n";
  return 0;
}

}  // namespace cli_detail

// Subcommand dispatcher shared by the binary and the tests. Returns the
// process exit code: 0 success, 1 runtime failure, 2 configuration error.
inline int cli_dispatch(const std::vector<std::string>& args) {
  CLI::App app{"Bayesian latent-factor analysis of OTU count tables"};
  app.require_subcommand(1);

  cli_detail::SimArgs sim;
  auto* sim_cmd = app.add_subcommand("simulate", "generate synthetic count tables");
  sim_cmd->add_option("--out", sim.out, "output directory")->required();
  sim_cmd->add_option("--I", sim.I, "number of OTUs");
  sim_cmd->add_option("--J", sim.J, "number of samples");
  sim_cmd->add_option("--L", sim.L, "number of latent factors");
  sim_cmd->add_option("--total", sim.total, "reads per sample");
  sim_cmd->add_option("--design", sim.design, "blocks | theta | clusters");
  sim_cmd->add_option("--theta", sim.theta, "factor equicorrelation for the theta design");
  sim_cmd->add_option("--power", sim.power, "weight exponent a (2 matches the prior)");
  sim_cmd->add_option("--alpha", sim.alpha, "concentration parameter");
  sim_cmd->add_option("--replicates", sim.replicates, "replicate count");
  sim_cmd->add_option("--seed", sim.seed, "RNG seed");

  // shared fit/init-em/ordinate/cluster settings
  RunConfig cfg;
  std::string config_path, archive_dir, mode_str;
  int workers = -1;
  long long iterations = -1, burn_in = -1, thin = -1;
  std::uint64_t seed = 0;
  bool seed_set = false;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--workers", workers, "worker thread count");
    auto* s = cmd->add_option("--seed", seed, "RNG seed");
    s->each([&](const std::string&) { seed_set = true; });
  };

  auto* fit_cmd = app.add_subcommand("fit", "run the MCMC sampler");
  fit_cmd->add_option("--input", cfg.input, "count table TSV");
  fit_cmd->add_option("--out", cfg.output, "output directory");
  fit_cmd->add_option("--config", config_path, "JSON config file");
  fit_cmd->add_option("--iterations", iterations, "MCMC iterations");
  fit_cmd->add_option("--burn-in", burn_in, "burn-in iterations");
  fit_cmd->add_option("--thin", thin, "thinning stride");
  fit_cmd->add_option("--alpha", cfg.hyper.alpha, "concentration parameter");
  fit_cmd->add_option("--m", cfg.hyper.m, "factor truncation (0 = min(J,15))");
  fit_cmd->add_option("--a1", cfg.hyper.a1, "first shrinkage shape");
  fit_cmd->add_option("--a2", cfg.hyper.a2, "later shrinkage shape");
  fit_cmd->add_option("--v", cfg.hyper.v, "local shrinkage degrees of freedom");
  fit_cmd->add_option("--em-d", cfg.em.D, "EM imputation replicates (initialization)");
  fit_cmd->add_option("--em-max-iter", cfg.em.max_iter, "EM iteration cap");
  fit_cmd->add_flag("--export-csv", cfg.export_csv, "also write CSV draw tables");
  add_common(fit_cmd);

  auto* em_cmd = app.add_subcommand("init-em", "fast similarity estimate");
  em_cmd->add_option("--input", cfg.input, "count table TSV");
  em_cmd->add_option("--out", cfg.output, "output directory");
  em_cmd->add_option("--D", cfg.em.D, "imputation replicates");
  em_cmd->add_option("--tol", cfg.em.tol, "convergence tolerance");
  em_cmd->add_option("--max-iter", cfg.em.max_iter, "iteration cap");
  add_common(em_cmd);

  auto* ord_cmd = app.add_subcommand("ordinate", "consensus ordination with credible regions");
  ord_cmd->add_option("--archive", archive_dir, "fit output directory")->required();
  ord_cmd->add_option("--out", cfg.output, "output directory")->required();
  ord_cmd->add_option("--d", cfg.ordination.d, "consensus dimensions");
  ord_cmd->add_option("--level", cfg.ordination.level, "credible level");
  ord_cmd->add_option("--mode", mode_str, "compromise mode: mean | rv");
  ord_cmd->add_option("--subsample", cfg.ordination.subsample,
                      "number of draws to project (0 = all)");

  auto* clu_cmd = app.add_subcommand("cluster", "posterior co-clustering");
  clu_cmd->add_option("--archive", archive_dir, "fit output directory")->required();
  clu_cmd->add_option("--out", cfg.output, "output directory")->required();
  clu_cmd->add_option("--k", cfg.cluster.k, "cluster count (0 = silhouette choice)");
  clu_cmd->add_option("--workers", workers, "worker thread count");

  int tv_max_k = 100;
  auto* dia_cmd = app.add_subcommand("diagnose", "sampler diagnostics");
  dia_cmd->add_option("--archive", archive_dir, "fit output directory")->required();
  dia_cmd->add_option("--out", cfg.output, "output directory")->required();
  dia_cmd->add_option("--tv-max-k", tv_max_k, "largest count for the tv_bound table");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (sim_cmd->parsed()) return cli_detail::run_simulate(sim);

    if (!config_path.empty()) {
      std::ifstream cf(config_path);
      if (!cf) throw config_error("cannot open config file: " + config_path);
      json cj;
      try {
        cf >> cj;
      } catch (const json::exception& e) {
        throw config_error(std::string("malformed config JSON: ") + e.what());
      }
      RunConfig file_cfg = parse_config(cj);
      // command-line flags override file values
      if (cfg.input.empty()) cfg.input = file_cfg.input;
      if (cfg.output.empty()) cfg.output = file_cfg.output;
      if (fit_cmd->count("--alpha") == 0) cfg.hyper.alpha = file_cfg.hyper.alpha;
      if (fit_cmd->count("--m") == 0) cfg.hyper.m = file_cfg.hyper.m;
      if (fit_cmd->count("--a1") == 0) cfg.hyper.a1 = file_cfg.hyper.a1;
      if (fit_cmd->count("--a2") == 0) cfg.hyper.a2 = file_cfg.hyper.a2;
      if (fit_cmd->count("--v") == 0) cfg.hyper.v = file_cfg.hyper.v;
      cfg.hyper.tau_shape = file_cfg.hyper.tau_shape;
      cfg.hyper.tau_rate = file_cfg.hyper.tau_rate;
      cfg.hyper.chain = file_cfg.hyper.chain;
      if (fit_cmd->count("--em-d") == 0) cfg.em = file_cfg.em;
      cfg.ordination = file_cfg.ordination;
      cfg.cluster.k = cfg.cluster.k != 0 ? cfg.cluster.k : file_cfg.cluster.k;
      cfg.export_csv = cfg.export_csv || file_cfg.export_csv;
    }
    if (iterations > 0) cfg.hyper.chain.iterations = iterations;
    if (burn_in >= 0) cfg.hyper.chain.burn_in = burn_in;
    if (thin > 0) cfg.hyper.chain.thin = thin;
    if (seed_set) cfg.hyper.chain.seed = seed;
    if (!mode_str.empty()) {
      if (mode_str == "mean") cfg.ordination.mode = CompromiseMode::kMean;
      else if (mode_str == "rv") cfg.ordination.mode = CompromiseMode::kRvWeighted;
      else throw config_error("--mode must be 'mean' or 'rv'");
    }
    cfg.validate_ranges();

    if (fit_cmd->parsed()) {
      if (cfg.input.empty() || cfg.output.empty())
        throw config_error("fit needs --input and --out (or a config file)");
      return cli_detail::run_fit(cfg, workers);
    }
    if (em_cmd->parsed()) {
      if (cfg.input.empty() || cfg.output.empty())
        throw config_error("init-em needs --input and --out");
      return cli_detail::run_init_em(cfg, workers);
    }
    if (ord_cmd->parsed()) return cli_detail::run_ordinate(archive_dir, cfg);
    if (clu_cmd->parsed()) return cli_detail::run_cluster(archive_dir, cfg, workers);
    if (dia_cmd->parsed()) return cli_detail::run_diagnose(archive_dir, cfg.output, tv_max_k);
    return 2;
  } catch (const config_error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

inline int cli_dispatch(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return cli_dispatch(args);
}

}  // namespace ddpf
