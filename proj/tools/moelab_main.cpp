// SPDX-License-Identifier: Apache-2.0
//
// moelab: sparse-checkpointing laboratory for MoE training.
//
//   schedule      print/emit the sparse checkpoint schedule for a config
//   train-verify  run the toy-engine recovery equivalence matrix
//   simulate      one cluster simulation, metrics + goodput CSV
//   sweep         simulations over MTBF x policy grids
//   trace-replay  replay a failure trace across all policies
//   popularity    emit routing-trace popularity statistics
//
// Exit codes: 0 ok, 1 verification failure, 2 configuration error.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>

#include "moelab/config.hpp"
#include "moelab/csv.hpp"
#include "moelab/recovery.hpp"
#include "moelab/schedule.hpp"
#include "moelab/sim.hpp"
#include "moelab/verify.hpp"
#include "moelab/workload.hpp"

namespace fs = std::filesystem;
using namespace moelab;

namespace {

int log_level() {
  const char* env = std::getenv("MOELAB_LOG");
  return env ? std::atoi(env) : 1;
}

void logv(const std::string& msg) {
  if (log_level() >= 2) std::cerr << "[moelab] " << msg << "\n";
}

struct CommonArgs {
  std::string config_path;
  std::string out_dir;
  std::vector<std::string> overrides;
  int64_t seed = -1;

  LabConfig load() const {
    Json j;
    try {
      j = Json::parse(read_file(config_path));
    } catch (const std::exception& e) {
      throw ConfigError(std::string("config parse: ") + e.what());
    }
    if (j.contains("config")) j = j.at("config");  // manifest input
    for (const auto& ov : overrides) apply_override(j, ov);
    LabConfig cfg = config_from_json(j);
    if (seed >= 0) cfg.seed = static_cast<uint64_t>(seed);
    return cfg;
  }
};

void write_manifest(const CommonArgs& args, const LabConfig& cfg,
                    const std::string& command) {
  if (args.out_dir.empty()) return;
  Json manifest;
  manifest["version"] = kArtifactVersion;
  manifest["command"] = command;
  manifest["seed"] = cfg.seed;
  manifest["config"] = config_to_json(cfg);
  write_file((fs::path(args.out_dir) / "manifest.json").string(),
             manifest.dump(2) + "\n");
}

void ensure_out(const CommonArgs& args) {
  if (!args.out_dir.empty()) fs::create_directories(args.out_dir);
}

// --- schedule -------------------------------------------------------------

int cmd_schedule(const CommonArgs& args) {
  const LabConfig cfg = args.load();
  auto ops = cfg.model.operators();
  const double t_iter = iteration_time(cfg.profile, cfg.parallel);
  const auto sched = build_schedule(ops, cfg.precision,
                                    cfg.cluster.pcie_bandwidth, t_iter,
                                    cfg.policy.ordering);

  check_log_budget(cfg.model, cfg.parallel, sched.wsparse, cfg.cluster);
  std::cout << "model " << cfg.model.name << ": " << ops.size()
            << " operators, t_iter " << csv_num(t_iter) << " s, budget "
            << csv_num(cfg.cluster.pcie_bandwidth * t_iter) << " bytes\n";
  std::cout << "W_sparse " << sched.wsparse << ", O_Active " << sched.o_active
            << (sched.fits_budget ? "" : "  [WARNING: exceeds budget, will stall]")
            << "\n";

  CsvWriter csv;
  csv.field("slot");
  csv.field("active_ids");
  csv.field("compute_only_ids");
  csv.field("slot_bytes");
  csv.field("slot_seconds");
  csv.endrow();
  auto join = [](const std::vector<uint32_t>& ids) {
    std::string s;
    for (size_t i = 0; i < ids.size(); ++i) {
      if (i) s += ';';
      s += std::to_string(ids[i]);
    }
    return s;
  };
  for (size_t i = 0; i < sched.slots.size(); ++i) {
    const int64_t bytes = sched.slot_bytes(i, ops, cfg.precision);
    csv.field(static_cast<int64_t>(i));
    csv.field(join(sched.slots[i].active));
    csv.field(join(sched.slots[i].compute_only));
    csv.field(bytes);
    csv.field(static_cast<double>(bytes) / cfg.cluster.pcie_bandwidth);
    csv.endrow();
    std::cout << "  slot " << i << ": " << sched.slots[i].active.size()
              << " full, " << sched.slots[i].compute_only.size()
              << " compute-only, " << bytes << " bytes\n";
  }
  if (!args.out_dir.empty()) {
    ensure_out(args);
    write_file((fs::path(args.out_dir) / "schedule.csv").string(), csv.str());
    write_manifest(args, cfg, "schedule");
  }
  return 0;
}

// --- train-verify -----------------------------------------------------------

int cmd_train_verify(const CommonArgs& args, int32_t seeds, int32_t positions,
                     bool include_moc, bool corrupt) {
  const LabConfig cfg = args.load();
  EngineConfig ecfg = cfg.engine_config();
  check_log_budget(cfg.model, cfg.parallel, 3, cfg.cluster);

  VerifyOptions opt;
  opt.seeds = seeds;
  opt.window_positions = positions;
  opt.include_moc = include_moc;
  opt.corrupt_snapshot = corrupt;
  logv("verify matrix: " + std::to_string(seeds) + " seeds x " +
       std::to_string(positions) + " windows");
  const VerifyReport report = run_verify_matrix(ecfg, opt);

  int64_t shown = 0;
  for (const auto& cell : report.cells) {
    if (!cell.pass || log_level() >= 2) {
      std::cout << (cell.pass ? "PASS " : "FAIL ") << "seed=" << cell.seed
                << " window=" << cell.window_start << " " << cell.check;
      if (!cell.detail.empty()) std::cout << "  (" << cell.detail << ")";
      std::cout << "\n";
      ++shown;
    }
  }
  std::cout << report.cells.size() - report.failed() << "/"
            << report.cells.size() << " checks passed";
  if (include_moc)
    std::cout << "; moc tokens_lost " << csv_num(report.moc_tokens_lost)
              << " across " << report.moc_stale_mismatches << " stale experts";
  std::cout << "\n";

  if (!args.out_dir.empty()) {
    ensure_out(args);
    CsvWriter csv;
    csv.field("seed");
    csv.field("window_start");
    csv.field("check");
    csv.field("pass");
    csv.endrow();
    for (const auto& cell : report.cells) {
      csv.field(static_cast<int64_t>(cell.seed));
      csv.field(static_cast<int64_t>(cell.window_start));
      csv.field(cell.check);
      csv.field(std::string(cell.pass ? "1" : "0"));
      csv.endrow();
    }
    write_file((fs::path(args.out_dir) / "verify.csv").string(), csv.str());
    write_manifest(args, cfg, "train-verify");
  }
  return report.all_pass() ? 0 : 1;
}

// --- simulate / sweep / trace-replay ---------------------------------------

// Fold command-line failure selections into the config itself so the
// manifest reproduces the run.
void apply_failure_flags(LabConfig& cfg, const std::string& trace_path,
                         double mtbf) {
  if (!trace_path.empty()) cfg.trace_file = trace_path;
  if (mtbf > 0) {
    cfg.failures.kind = FailureProcess::Kind::Poisson;
    cfg.failures.mtbf = mtbf;
    cfg.trace_file.clear();
  }
}

FailureProcess resolve_failures(const LabConfig& cfg) {
  FailureProcess p = cfg.failures;
  if (!cfg.trace_file.empty()) {
    p.kind = FailureProcess::Kind::Trace;
    p.trace = load_trace_csv(cfg.trace_file);
    p.trace.check(cfg.cluster.nodes);
    int32_t beyond = 0;
    for (const auto& e : p.trace.events)
      if (e.t >= cfg.horizon) ++beyond;
    if (beyond > 0)
      std::cerr << "[moelab] WARNING: " << beyond
                << " trace events beyond the horizon are dropped\n";
  }
  return p;
}

int cmd_simulate(const CommonArgs& args, const std::string& policy,
                 const std::string& trace_path, double mtbf) {
  LabConfig cfg = args.load();
  if (!policy.empty()) cfg.policy.kind = policy_from_string(policy);
  apply_failure_flags(cfg, trace_path, mtbf);
  SimConfig sim = cfg.sim_config();
  sim.failures = resolve_failures(cfg);

  const Metrics m = run_simulation(sim);
  CsvWriter csv;
  csv.out << metrics_csv_header();
  metrics_csv_row(csv, m);
  std::cout << csv.str();
  if (m.checkpoint_never_persisted)
    std::cerr << "[moelab] WARNING: no checkpoint persisted before a failure\n";

  if (!args.out_dir.empty()) {
    ensure_out(args);
    write_file((fs::path(args.out_dir) / "metrics.csv").string(), csv.str());
    write_file((fs::path(args.out_dir) / ("goodput_" + m.policy + ".csv")).string(),
               goodput_csv(m, sim.policy.kind == PolicyKind::Moc));
    write_manifest(args, cfg, "simulate");
  }
  return 0;
}

int cmd_sweep(const CommonArgs& args, const std::vector<double>& mtbfs,
              const std::vector<std::string>& policies, int32_t seeds) {
  LabConfig cfg = args.load();
  SweepRequest req;
  req.configs = {cfg.sim_config()};
  req.mtbf_list = mtbfs;
  req.seeds = seeds;
  if (policies.empty()) {
    req.policies = {PolicyKind::Sparse, PolicyKind::Gemini, PolicyKind::CheckFreq,
                    PolicyKind::Moc};
  } else {
    for (const auto& p : policies) req.policies.push_back(policy_from_string(p));
  }
  const auto rows = sweep(req);
  CsvWriter csv;
  csv.out << metrics_csv_header();
  for (const auto& m : rows) {
    if (!m.error.empty()) {
      std::cerr << "[moelab] sweep row failed: " << m.model << "/" << m.policy
                << ": " << m.error << "\n";
      continue;
    }
    metrics_csv_row(csv, m);
  }
  std::cout << csv.str();
  if (!args.out_dir.empty()) {
    ensure_out(args);
    write_file((fs::path(args.out_dir) / "metrics.csv").string(), csv.str());
    write_manifest(args, cfg, "sweep");
  }
  return 0;
}

int cmd_trace_replay(const CommonArgs& args, const std::string& trace_path,
                     const std::vector<std::string>& policies) {
  LabConfig cfg = args.load();
  if (!trace_path.empty()) cfg.trace_file = trace_path;
  if (cfg.trace_file.empty()) throw ConfigError("trace-replay requires --trace");

  std::vector<PolicyKind> kinds;
  if (policies.empty()) {
    kinds = {PolicyKind::Sparse, PolicyKind::Gemini, PolicyKind::CheckFreq,
             PolicyKind::Moc};
  } else {
    for (const auto& p : policies) kinds.push_back(policy_from_string(p));
  }

  CsvWriter csv;
  csv.out << metrics_csv_header();
  ensure_out(args);
  for (PolicyKind k : kinds) {
    SimConfig sim = cfg.sim_config();
    sim.policy.kind = k;
    sim.failures = resolve_failures(cfg);
    const Metrics m = run_simulation(sim);
    metrics_csv_row(csv, m);
    if (!args.out_dir.empty())
      write_file(
          (fs::path(args.out_dir) / ("goodput_" + m.policy + ".csv")).string(),
          goodput_csv(m, k == PolicyKind::Moc));
  }
  std::cout << csv.str();
  if (!args.out_dir.empty()) {
    write_file((fs::path(args.out_dir) / "metrics.csv").string(), csv.str());
    write_manifest(args, cfg, "trace-replay");
  }
  return 0;
}

// --- popularity -------------------------------------------------------------

int cmd_popularity(const CommonArgs& args, int64_t iterations,
                   int64_t tokens_per_iter, int64_t buckets) {
  LabConfig cfg = args.load();
  Rng rng(cfg.seed);
  PopularityVector pv = cfg.popularity;
  if (pv.p.empty()) {
    const double skew = cfg.workload_skew >= 0 ? cfg.workload_skew : 0.0;
    pv = popularity_with_skew(skew, cfg.model.experts_per_layer);
  }
  if (tokens_per_iter <= 0)
    tokens_per_iter = cfg.parallel.global_batch * cfg.model.tokens_per_sample;

  Rng trace_rng = rng.substream("routing");
  const auto trace = gen_routing_trace(pv, cfg.model.top_k, iterations,
                                       tokens_per_iter, DriftSpec{}, trace_rng);
  const auto stats = active_expert_stats(trace);

  // expert shares per iteration bucket, then one summary row
  CsvWriter csv;
  csv.field("expert_id");
  csv.field("tokens");
  csv.field("share");
  csv.endrow();
  buckets = std::max<int64_t>(1, std::min(buckets, iterations));
  const int64_t per_bucket = (iterations + buckets - 1) / buckets;
  for (int64_t b = 0; b < buckets; ++b) {
    const int64_t lo = b * per_bucket;
    const int64_t hi = std::min<int64_t>(iterations, lo + per_bucket);
    std::vector<int64_t> tokens(pv.experts(), 0);
    int64_t total = 0;
    for (int64_t it = lo; it < hi; ++it)
      for (int32_t e = 0; e < pv.experts(); ++e) {
        tokens[e] += trace.iterations[it].expert_tokens[e];
        total += trace.iterations[it].expert_tokens[e];
      }
    for (int32_t e = 0; e < pv.experts(); ++e) {
      csv.field(static_cast<int64_t>(e));
      csv.field(tokens[e]);
      csv.field(static_cast<double>(tokens[e]) / static_cast<double>(total));
      csv.endrow();
    }
  }
  int64_t grand_total = 0;
  for (int64_t t : stats.tokens_per_expert) grand_total += t;
  PopularityVector measured;
  for (int64_t t : stats.tokens_per_expert)
    measured.p.push_back(static_cast<double>(t) / static_cast<double>(grand_total));
  csv.field("summary");
  csv.field(std::string("hhi=") + csv_num(hhi(measured)));
  csv.field(std::string("skewness=") + csv_num(skewness(measured)));
  csv.endrow();

  std::cout << csv.str();
  if (!args.out_dir.empty()) {
    ensure_out(args);
    write_file((fs::path(args.out_dir) / "popularity.csv").string(), csv.str());
    write_manifest(args, cfg, "popularity");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"moelab: sparse checkpointing laboratory for MoE training"};
  app.require_subcommand(1);

  CommonArgs common;
  std::string policy, trace_path;
  double mtbf = 0;
  std::vector<double> mtbf_list;
  std::vector<std::string> policy_list;
  int32_t seeds = 20, positions = 6, sweep_seeds = 1;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "configuration file (JSON)")
        ->required();
    sub->add_option("--out", common.out_dir, "output directory");
    sub->add_option("--seed", common.seed, "override the top-level seed");
    sub->add_option("--set", common.overrides,
                    "override a config key, e.g. sim.mtbf_s=600");
  };

  auto* sc_schedule = app.add_subcommand("schedule", "emit the sparse schedule");
  add_common(sc_schedule);

  auto* sc_verify =
      app.add_subcommand("train-verify", "toy-engine equivalence matrix");
  add_common(sc_verify);
  sc_verify->add_option("--seeds", seeds, "number of seeds (default 20)");
  sc_verify->add_option("--positions", positions,
                        "number of window positions (default 6)");
  bool include_moc = false, corrupt = false;
  sc_verify->add_flag("--include-moc", include_moc,
                      "also report the partial-expert baseline's token loss");
  sc_verify->add_flag("--corrupt-snapshot", corrupt,
                      "test hook: corrupt one record and expect a failure");

  auto* sc_sim = app.add_subcommand("simulate", "run one simulation");
  add_common(sc_sim);
  sc_sim->add_option("--policy", policy, "sparse|checkfreq|gemini|moc");
  sc_sim->add_option("--mtbf", mtbf, "Poisson MTBF seconds");
  sc_sim->add_option("--trace", trace_path, "failure trace CSV");

  auto* sc_sweep = app.add_subcommand("sweep", "simulate over MTBF x policy");
  add_common(sc_sweep);
  sc_sweep->add_option("--mtbf", mtbf_list, "MTBF list (seconds)");
  sc_sweep->add_option("--policy", policy_list, "policy list");
  sc_sweep->add_option("--seeds", sweep_seeds, "repetitions per cell");

  auto* sc_replay = app.add_subcommand("trace-replay", "replay a failure trace");
  add_common(sc_replay);
  sc_replay->add_option("--trace", trace_path, "failure trace CSV")->required();
  sc_replay->add_option("--policy", policy_list, "policy list");

  auto* sc_pop = app.add_subcommand("popularity", "routing popularity stats");
  add_common(sc_pop);
  int64_t pop_iters = 8, pop_tokens = 0, pop_buckets = 1;
  sc_pop->add_option("--iterations", pop_iters, "trace iterations");
  sc_pop->add_option("--tokens", pop_tokens, "tokens per iteration");
  sc_pop->add_option("--buckets", pop_buckets, "iteration buckets to report");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;  // usage problems are configuration errors
  }

  try {
    if (sc_schedule->parsed()) return cmd_schedule(common);
    if (sc_verify->parsed())
      return cmd_train_verify(common, seeds, positions, include_moc, corrupt);
    if (sc_sim->parsed()) return cmd_simulate(common, policy, trace_path, mtbf);
    if (sc_sweep->parsed()) return cmd_sweep(common, mtbf_list, policy_list,
                                             sweep_seeds);
    if (sc_replay->parsed()) return cmd_trace_replay(common, trace_path,
                                                     policy_list);
    if (sc_pop->parsed())
      return cmd_popularity(common, pop_iters, pop_tokens, pop_buckets);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
