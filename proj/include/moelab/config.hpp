// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <json.hpp>

#include <set>
#include <string>
#include <vector>

#include "moelab/csv.hpp"
#include "moelab/engine.hpp"
#include "moelab/sim.hpp"

namespace moelab {

using Json = nlohmann::json;

inline constexpr const char* kArtifactVersion = "1.0.0";

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void reject_unknown(const Json& obj, const std::string& section,
                           const std::set<std::string>& allowed) {
  for (const auto& [key, _] : obj.items()) {
    if (!allowed.count(key))
      throw ConfigError("unknown key '" + key + "' in section '" + section + "'");
  }
}

template <typename T>
void get_to(const Json& obj, const char* key, T& out) {
  if (obj.contains(key)) obj.at(key).get_to(out);
}

}  // namespace detail

// Everything one run needs: the toy engine pieces plus the simulator pieces,
// resolved from one file. Sections map one-to-one onto the domain types.
struct LabConfig {
  ModelSpec model;
  PrecisionPlan precision;
  ClusterSpec cluster;
  ParallelPlan parallel;
  ProfiledStats profile;
  SimPolicy policy;
  FailureProcess failures;
  PopularityVector popularity;
  OptimizerConfig optimizer;
  double horizon = 3600.0;
  double t_restart = 30.0;
  double detection_delay = 5.0;
  int32_t replication_r = 2;
  double goodput_bucket = 60.0;
  uint64_t seed = 1;
  double workload_skew = -1.0;  // >= 0: build popularity from skewness
  std::string trace_file;       // failure trace CSV; overrides the process

  EngineConfig engine_config() const {
    EngineConfig cfg;
    cfg.model = model;
    cfg.precision = precision;
    cfg.parallel = parallel;
    cfg.optimizer = optimizer;
    cfg.seed = seed;
    return cfg;
  }

  SimConfig sim_config() const {
    SimConfig cfg;
    cfg.model = model;
    cfg.precision = precision;
    cfg.cluster = cluster;
    cfg.parallel = parallel;
    cfg.profile = profile;
    cfg.policy = policy;
    cfg.failures = failures;
    cfg.popularity = popularity;
    if (popularity.p.empty() && workload_skew >= 0)
      cfg.popularity = popularity_with_skew(workload_skew, model.experts_per_layer);
    cfg.horizon = horizon;
    cfg.t_restart = t_restart;
    cfg.detection_delay = detection_delay;
    cfg.replication_r = replication_r;
    cfg.goodput_bucket = goodput_bucket;
    cfg.seed = seed;
    return cfg;
  }
};

inline LabConfig config_from_json(const Json& root);

inline Json config_to_json(const LabConfig& c) {
  Json j;
  Json& m = j["model"];
  m["name"] = c.model.name;
  m["layers"] = c.model.layers;
  m["experts_per_layer"] = c.model.experts_per_layer;
  m["top_k"] = c.model.top_k;
  m["shared_experts"] = c.model.shared_experts;
  m["tokens_per_sample"] = c.model.tokens_per_sample;
  m["token_dim"] = c.model.token_dim;
  m["expert_hidden"] = c.model.expert_hidden;
  m["nonexpert_hidden"] = c.model.nonexpert_hidden;
  m["residual"] = c.model.residual;
  if (c.model.expert_params) m["expert_params"] = *c.model.expert_params;
  if (c.model.nonexpert_params) m["nonexpert_params"] = *c.model.nonexpert_params;
  if (c.model.gate_params) m["gate_params"] = *c.model.gate_params;
  if (c.model.expert_capacity > 0) m["expert_capacity"] = c.model.expert_capacity;

  Json& p = j["precision"];
  p["compute_bytes"] = c.precision.compute_bytes;
  p["master_bytes"] = c.precision.master_bytes;
  p["optimizer_bytes"] = c.precision.optimizer_bytes;

  Json& cl = j["cluster"];
  cl["nodes"] = c.cluster.nodes;
  cl["gpus_per_node"] = c.cluster.gpus_per_node;
  cl["pcie_bandwidth"] = c.cluster.pcie_bandwidth;
  cl["replication_bandwidth"] = c.cluster.replication_bandwidth;
  cl["persist_bandwidth"] = c.cluster.persist_bandwidth;
  cl["cpu_mem_per_node"] = c.cluster.cpu_mem_per_node;
  for (const auto& [size, coeff] : c.cluster.nccl) {
    cl["nccl"][std::to_string(size)] = {{"alpha", coeff.alpha},
                                        {"beta", coeff.beta}};
  }

  Json& pa = j["parallel"];
  pa["pp_stages"] = c.parallel.pp_stages;
  pa["dp_degree"] = c.parallel.dp_degree;
  pa["ep_degree"] = c.parallel.ep_degree;
  pa["microbatches"] = c.parallel.microbatches;
  pa["microbatch_size"] = c.parallel.microbatch_size;
  pa["global_batch"] = c.parallel.global_batch;

  Json& pr = j["profile"];
  pr["t_stage"] = c.profile.t_stage;
  pr["t_sync"] = c.profile.t_sync;
  pr["t_update"] = c.profile.t_update;
  if (c.profile.t_iter_override > 0) pr["t_iter"] = c.profile.t_iter_override;

  Json& po = j["policy"];
  po["type"] = policy_name(c.policy.kind);
  po["checkfreq_cap"] = c.policy.checkfreq_cap;
  if (c.policy.fixed_interval > 0) po["fixed_interval"] = c.policy.fixed_interval;
  po["moc_initial_k"] = c.policy.moc_initial_k;
  po["moc_budget_fraction"] = c.policy.moc_budget_fraction;
  po["upstream_logging"] = c.policy.upstream_logging;
  po["conversion_compute_savings"] = c.policy.conversion_compute_savings;
  switch (c.policy.ordering) {
    case OrderingScheme::HardCount: po["ordering"] = "hard"; break;
    case OrderingScheme::SoftCount: po["ordering"] = "soft"; break;
    case OrderingScheme::TimeDecayed: po["ordering"] = "decay"; break;
    case OrderingScheme::CapacityAware: po["ordering"] = "capacity"; break;
  }

  Json& s = j["sim"];
  if (c.failures.kind == FailureProcess::Kind::Poisson)
    s["mtbf_s"] = c.failures.mtbf;
  s["horizon_s"] = c.horizon;
  s["t_restart"] = c.t_restart;
  s["detection_delay"] = c.detection_delay;
  s["replication_r"] = c.replication_r;
  s["goodput_bucket_s"] = c.goodput_bucket;
  s["seed"] = c.seed;
  if (!c.trace_file.empty()) s["trace_file"] = c.trace_file;

  Json& w = j["workload"];
  if (c.workload_skew >= 0) w["skew"] = c.workload_skew;
  if (!c.popularity.p.empty()) w["popularity"] = c.popularity.p;

  Json& o = j["optimizer"];
  o["type"] = c.optimizer.kind == OptimizerConfig::Kind::Adam ? "adam" : "sgd";
  o["lr"] = c.optimizer.lr;
  o["beta1"] = c.optimizer.beta1;
  o["beta2"] = c.optimizer.beta2;
  o["eps"] = c.optimizer.eps;
  return j;
}

inline LabConfig config_from_json(const Json& root) {
  Json j = root;
  // manifests wrap the resolved config; accept them directly
  if (j.contains("config")) j = j.at("config");

  LabConfig c;
  detail::reject_unknown(j, "(top level)",
                         {"model", "precision", "cluster", "parallel", "profile",
                          "policy", "sim", "workload", "optimizer"});

  if (j.contains("model")) {
    const Json& m = j.at("model");
    detail::reject_unknown(
        m, "model",
        {"name", "layers", "experts_per_layer", "top_k", "shared_experts",
         "tokens_per_sample", "token_dim", "expert_hidden", "nonexpert_hidden",
         "residual", "expert_params", "nonexpert_params", "gate_params",
         "expert_capacity"});
    detail::get_to(m, "name", c.model.name);
    detail::get_to(m, "layers", c.model.layers);
    detail::get_to(m, "experts_per_layer", c.model.experts_per_layer);
    detail::get_to(m, "top_k", c.model.top_k);
    detail::get_to(m, "shared_experts", c.model.shared_experts);
    detail::get_to(m, "tokens_per_sample", c.model.tokens_per_sample);
    detail::get_to(m, "token_dim", c.model.token_dim);
    detail::get_to(m, "expert_hidden", c.model.expert_hidden);
    detail::get_to(m, "nonexpert_hidden", c.model.nonexpert_hidden);
    detail::get_to(m, "residual", c.model.residual);
    detail::get_to(m, "expert_capacity", c.model.expert_capacity);
    if (m.contains("expert_params"))
      c.model.expert_params = m.at("expert_params").get<int64_t>();
    if (m.contains("nonexpert_params"))
      c.model.nonexpert_params = m.at("nonexpert_params").get<int64_t>();
    if (m.contains("gate_params"))
      c.model.gate_params = m.at("gate_params").get<int64_t>();
  }

  if (j.contains("precision")) {
    const Json& p = j.at("precision");
    detail::reject_unknown(p, "precision",
                           {"compute_bytes", "master_bytes", "optimizer_bytes"});
    detail::get_to(p, "compute_bytes", c.precision.compute_bytes);
    detail::get_to(p, "master_bytes", c.precision.master_bytes);
    detail::get_to(p, "optimizer_bytes", c.precision.optimizer_bytes);
  }

  if (j.contains("cluster")) {
    const Json& cl = j.at("cluster");
    detail::reject_unknown(cl, "cluster",
                           {"nodes", "gpus_per_node", "pcie_bandwidth",
                            "replication_bandwidth", "persist_bandwidth",
                            "cpu_mem_per_node", "nccl"});
    detail::get_to(cl, "nodes", c.cluster.nodes);
    detail::get_to(cl, "gpus_per_node", c.cluster.gpus_per_node);
    detail::get_to(cl, "pcie_bandwidth", c.cluster.pcie_bandwidth);
    detail::get_to(cl, "replication_bandwidth", c.cluster.replication_bandwidth);
    detail::get_to(cl, "persist_bandwidth", c.cluster.persist_bandwidth);
    detail::get_to(cl, "cpu_mem_per_node", c.cluster.cpu_mem_per_node);
    if (cl.contains("nccl")) {
      for (const auto& [size, coeff] : cl.at("nccl").items()) {
        NcclCoeff nc;
        detail::get_to(coeff, "alpha", nc.alpha);
        detail::get_to(coeff, "beta", nc.beta);
        c.cluster.nccl[std::stoi(size)] = nc;
      }
    }
  }

  if (j.contains("parallel")) {
    const Json& p = j.at("parallel");
    detail::reject_unknown(p, "parallel",
                           {"pp_stages", "dp_degree", "ep_degree", "microbatches",
                            "microbatch_size", "global_batch"});
    detail::get_to(p, "pp_stages", c.parallel.pp_stages);
    detail::get_to(p, "dp_degree", c.parallel.dp_degree);
    detail::get_to(p, "ep_degree", c.parallel.ep_degree);
    detail::get_to(p, "microbatches", c.parallel.microbatches);
    detail::get_to(p, "microbatch_size", c.parallel.microbatch_size);
    detail::get_to(p, "global_batch", c.parallel.global_batch);
  }

  if (j.contains("profile")) {
    const Json& p = j.at("profile");
    detail::reject_unknown(p, "profile",
                           {"t_stage", "t_sync", "t_update", "t_iter"});
    detail::get_to(p, "t_stage", c.profile.t_stage);
    detail::get_to(p, "t_sync", c.profile.t_sync);
    detail::get_to(p, "t_update", c.profile.t_update);
    detail::get_to(p, "t_iter", c.profile.t_iter_override);
  }

  if (j.contains("policy")) {
    const Json& p = j.at("policy");
    detail::reject_unknown(
        p, "policy",
        {"type", "checkfreq_cap", "fixed_interval", "moc_initial_k",
         "moc_budget_fraction", "ordering", "upstream_logging",
         "conversion_compute_savings"});
    if (p.contains("type"))
      c.policy.kind = policy_from_string(p.at("type").get<std::string>());
    detail::get_to(p, "checkfreq_cap", c.policy.checkfreq_cap);
    detail::get_to(p, "fixed_interval", c.policy.fixed_interval);
    detail::get_to(p, "moc_initial_k", c.policy.moc_initial_k);
    detail::get_to(p, "moc_budget_fraction", c.policy.moc_budget_fraction);
    detail::get_to(p, "upstream_logging", c.policy.upstream_logging);
    detail::get_to(p, "conversion_compute_savings",
                   c.policy.conversion_compute_savings);
    if (p.contains("ordering"))
      c.policy.ordering = ordering_from_string(p.at("ordering").get<std::string>());
  }

  if (j.contains("sim")) {
    const Json& s = j.at("sim");
    detail::reject_unknown(s, "sim",
                           {"mtbf_s", "horizon_s", "t_restart", "detection_delay",
                            "replication_r", "goodput_bucket_s", "seed",
                            "trace_file"});
    if (s.contains("mtbf_s")) {
      c.failures.kind = FailureProcess::Kind::Poisson;
      c.failures.mtbf = s.at("mtbf_s").get<double>();
    }
    detail::get_to(s, "horizon_s", c.horizon);
    detail::get_to(s, "t_restart", c.t_restart);
    detail::get_to(s, "detection_delay", c.detection_delay);
    detail::get_to(s, "replication_r", c.replication_r);
    detail::get_to(s, "goodput_bucket_s", c.goodput_bucket);
    detail::get_to(s, "seed", c.seed);
    detail::get_to(s, "trace_file", c.trace_file);
  }

  if (j.contains("workload")) {
    const Json& w = j.at("workload");
    detail::reject_unknown(w, "workload", {"skew", "popularity"});
    detail::get_to(w, "skew", c.workload_skew);
    if (w.contains("popularity")) {
      c.popularity.p = w.at("popularity").get<std::vector<double>>();
      c.popularity.check();
    }
  }

  if (j.contains("optimizer")) {
    const Json& o = j.at("optimizer");
    detail::reject_unknown(o, "optimizer", {"type", "lr", "beta1", "beta2", "eps"});
    if (o.contains("type")) {
      const std::string t = o.at("type").get<std::string>();
      if (t == "adam") c.optimizer.kind = OptimizerConfig::Kind::Adam;
      else if (t == "sgd") c.optimizer.kind = OptimizerConfig::Kind::Sgd;
      else throw ConfigError("unknown optimizer type: " + t);
    }
    detail::get_to(o, "lr", c.optimizer.lr);
    detail::get_to(o, "beta1", c.optimizer.beta1);
    detail::get_to(o, "beta2", c.optimizer.beta2);
    detail::get_to(o, "eps", c.optimizer.eps);
  }
  return c;
}

inline LabConfig load_config(const std::string& path) {
  Json j;
  try {
    j = Json::parse(read_file(path));
  } catch (const Json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  try {
    return config_from_json(j);
  } catch (const Json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

// key=value override on a dotted path, e.g. "sim.mtbf_s=600" or
// "policy.type=gemini". Values parse as JSON when they can, strings otherwise.
inline void apply_override(Json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos)
    throw ConfigError("override must be key=value: " + assignment);
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);

  Json* cur = &j;
  size_t start = 0;
  for (;;) {
    const size_t dot = path.find('.', start);
    const std::string key = path.substr(start, dot - start);
    if (key.empty()) throw ConfigError("bad override path: " + path);
    if (dot == std::string::npos) {
      Json value = Json::parse(raw, nullptr, false);
      (*cur)[key] = value.is_discarded() ? Json(raw) : value;
      return;
    }
    cur = &(*cur)[key];
    start = dot + 1;
  }
}

// === failure trace CSV ====================================================
// header: t_seconds,node_id,kind    kind is always "crash"

inline FailureTrace load_trace_csv(const std::string& path) {
  const std::string content = read_file(path);
  FailureTrace trace;
  std::istringstream ss(content);
  std::string line;
  bool header = true;
  while (std::getline(ss, line)) {
    if (line.empty()) continue;
    if (header) {
      header = false;
      if (line.rfind("t_seconds", 0) == 0) continue;  // header row
    }
    const auto cells = csv_split(line);
    if (cells.size() < 2)
      throw ConfigError(path + ": malformed trace line: " + line);
    FailureEvent e;
    e.t = std::stod(cells[0]);
    e.node = std::stoi(cells[1]);
    if (cells.size() > 2 && !cells[2].empty()) e.kind = cells[2];
    trace.events.push_back(e);
  }
  return trace;
}

inline std::string trace_to_csv(const FailureTrace& trace) {
  CsvWriter w;
  w.field("t_seconds");
  w.field("node_id");
  w.field("kind");
  w.endrow();
  for (const auto& e : trace.events) {
    w.field(e.t);
    w.field(static_cast<int64_t>(e.node));
    w.field(e.kind);
    w.endrow();
  }
  return w.str();
}

// === metrics CSV ==========================================================

inline std::string metrics_csv_header() {
  return "model,policy,mtbf_s,wsparse_or_interval,overhead_s_per_iter,"
         "overhead_pct,recovery_total_s,ettr,tokens_lost\n";
}

inline void metrics_csv_row(CsvWriter& w, const Metrics& m) {
  w.field(m.model);
  w.field(m.policy);
  w.field(m.mtbf_s);
  w.field(m.wsparse_or_interval);
  w.field(m.overhead_s_per_iter);
  w.field(m.overhead_pct);
  w.field(m.recovery_total_s);
  w.field(m.ettr);
  w.field(m.tokens_lost);
  w.endrow();
}

inline std::string goodput_csv(const Metrics& m, bool moc_fraction_column) {
  CsvWriter w;
  w.field("bucket_start_s");
  w.field("samples_per_s");
  if (moc_fraction_column) w.field("expert_fraction");
  w.endrow();
  for (const auto& gp : m.goodput) {
    w.field(gp.bucket_start);
    w.field(gp.samples_per_s);
    if (moc_fraction_column) w.field(gp.moc_expert_fraction);
    w.endrow();
  }
  return w.str();
}

}  // namespace moelab
