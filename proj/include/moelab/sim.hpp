// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "moelab/core.hpp"
#include "moelab/rng.hpp"
#include "moelab/schedule.hpp"
#include "moelab/workload.hpp"

namespace moelab {

// === timing models ========================================================

// NCCL collective cost: alpha(p) + beta(p) * message bytes.
inline double nccl_time(double message_bytes, int32_t group_size,
                        const ClusterSpec& cluster) {
  auto it = cluster.nccl.find(group_size);
  if (it == cluster.nccl.end())
    throw std::invalid_argument("nccl_time: no coefficients for group size " +
                                std::to_string(group_size));
  return it->second.alpha + it->second.beta * message_bytes;
}

// 1F1B pipeline iteration estimate: fill/drain term per pipeline, straggler
// max across data-parallel pipelines, plus synchronization and update.
inline double iteration_time(const ProfiledStats& profile,
                             const ParallelPlan& plan) {
  if (profile.t_iter_override > 0) return profile.t_iter_override;
  const auto pipeline_time = [&](const std::vector<double>& stages) {
    if (stages.empty())
      throw std::invalid_argument("iteration_time: no stage times");
    const double slowest = *std::max_element(stages.begin(), stages.end());
    return (plan.microbatches + static_cast<int64_t>(stages.size()) - 1) *
           slowest;
  };
  double pipe = pipeline_time(profile.t_stage);
  return pipe + profile.t_sync + profile.t_update;
}

inline double iteration_time_multi(
    const std::vector<std::vector<double>>& pipelines, const ParallelPlan& plan,
    double t_sync, double t_update) {
  double worst = 0;
  for (const auto& stages : pipelines) {
    const double slowest = *std::max_element(stages.begin(), stages.end());
    worst = std::max(worst, (plan.microbatches +
                             static_cast<int64_t>(stages.size()) - 1) *
                                slowest);
  }
  return worst + t_sync + t_update;
}

// === failure processes ====================================================

struct FailureEvent {
  double t = 0.0;      // seconds
  int32_t node = 0;
  std::string kind = "crash";
};

struct FailureTrace {
  std::vector<FailureEvent> events;
  int32_t dropped_beyond_horizon = 0;

  void check(int32_t nodes) const {
    double last = 0;
    for (const auto& e : events) {
      if (e.t < last) throw std::invalid_argument("trace timestamps decrease");
      if (e.node < 0 || e.node >= nodes)
        throw std::invalid_argument("trace node id out of range: " +
                                    std::to_string(e.node));
      last = e.t;
    }
  }
};

struct FailureProcess {
  enum class Kind : uint8_t { Poisson = 0, Trace = 1 };
  Kind kind = Kind::Poisson;
  double mtbf = 3600.0;
  FailureTrace trace;
};

// Materialize a failure process on [0, horizon): exponential inter-arrival
// gaps for Poisson, verbatim events for traces (later ones dropped).
inline FailureTrace inject_failures(const FailureProcess& process, double horizon,
                                    int32_t nodes, Rng& rng) {
  FailureTrace out;
  if (process.kind == FailureProcess::Kind::Trace) {
    for (const auto& e : process.trace.events) {
      if (e.t >= horizon) {
        out.dropped_beyond_horizon += 1;
        continue;
      }
      out.events.push_back(e);
    }
    return out;
  }
  if (process.mtbf <= 0) throw std::invalid_argument("poisson: mtbf must be > 0");
  double t = 0;
  for (;;) {
    t += rng.exponential(process.mtbf);
    if (t >= horizon) break;
    FailureEvent e;
    e.t = t;
    e.node = static_cast<int32_t>(rng.uniform_index(std::max(nodes, 1)));
    out.events.push_back(e);
  }
  return out;
}

// === simulation config and metrics =======================================

enum class PolicyKind : uint8_t { Sparse = 0, CheckFreq = 1, Gemini = 2, Moc = 3 };

inline std::string policy_name(PolicyKind k) {
  switch (k) {
    case PolicyKind::Sparse: return "sparse";
    case PolicyKind::CheckFreq: return "checkfreq";
    case PolicyKind::Gemini: return "gemini";
    case PolicyKind::Moc: return "moc";
  }
  return "?";
}

inline PolicyKind policy_from_string(const std::string& s) {
  if (s == "sparse") return PolicyKind::Sparse;
  if (s == "checkfreq") return PolicyKind::CheckFreq;
  if (s == "gemini") return PolicyKind::Gemini;
  if (s == "moc") return PolicyKind::Moc;
  throw std::invalid_argument("unknown policy: " + s);
}

struct SimPolicy {
  PolicyKind kind = PolicyKind::Sparse;
  double checkfreq_cap = 0.03;
  int64_t fixed_interval = 0;         // >0 pins the dense policies' interval
  int32_t moc_initial_k = 0;          // 0 = experts_per_layer / 8
  double moc_budget_fraction = 0.001;
  OrderingScheme ordering = OrderingScheme::HardCount;
  bool upstream_logging = true;       // sparse policy: localized replay cost
  // Conversion replay cost discount from skipped weight gradients and
  // updates of still-frozen operators (fraction of backward work saved).
  bool conversion_compute_savings = false;
};

struct SimConfig {
  ModelSpec model;
  PrecisionPlan precision;
  ClusterSpec cluster;
  ParallelPlan parallel;
  ProfiledStats profile;
  SimPolicy policy;
  FailureProcess failures;
  PopularityVector popularity;  // optional; uniform when empty
  double horizon = 3600.0;
  double t_restart = 30.0;
  double detection_delay = 5.0;
  int32_t replication_r = 2;
  double goodput_bucket = 60.0;
  uint64_t seed = 1;
};

struct GoodputPoint {
  double bucket_start = 0;
  double samples_per_s = 0;
  double moc_expert_fraction = 0;  // populated for the MoC policy
};

struct Metrics {
  std::string model;
  std::string policy;
  double mtbf_s = 0;
  double wsparse_or_interval = 0;
  double overhead_s_per_iter = 0;
  double overhead_pct = 0;
  double recovery_total_s = 0;
  double ettr = 0;
  double tokens_lost = 0;
  std::string error;  // non-empty: the run failed (sweep keeps the row)

  double useful_s = 0;
  double stall_s = 0;
  double recovery_s = 0;
  double idle_s = 0;
  double wall_s = 0;
  int64_t iterations = 0;
  int64_t failures = 0;
  double t_iter = 0;
  // re-execution work only, the quantity the interval/window closed forms
  // describe; recovery_s additionally contains the aborted partial iterations
  double recovery_recompute_s = 0;
  double max_recovery_event_s = 0;
  double mean_recovery_event_s = 0;
  bool checkpoint_never_persisted = false;

  std::vector<GoodputPoint> goodput;
  std::vector<std::pair<double, double>> policy_trajectory;  // (t, K or interval)
};

// === simulator ============================================================

namespace detail {

// Shared replication/persist pipe: records drain FIFO at a fixed bandwidth.
struct DrainQueue {
  double bandwidth = 1.0;
  double tail = 0.0;  // time the pipe frees up

  double push(double ready_time, double bytes) {
    tail = std::max(tail, ready_time) + bytes / bandwidth;
    return tail;
  }
};

struct PersistedTracker {
  // (state, done_time), monotone in both; pruned to the persisted frontier
  std::deque<std::pair<int64_t, double>> pending;
  int64_t persisted = 0;  // newest state with done_time <= now

  void add(int64_t state, double done_time) { pending.emplace_back(state, done_time); }
  int64_t query(double now) {
    while (!pending.empty() && pending.front().second <= now) {
      persisted = std::max(persisted, pending.front().first);
      pending.pop_front();
    }
    return persisted;
  }
};

}  // namespace detail

// Discrete-event training simulation: per-iteration advance with snapshot
// stalls, asynchronous replication, failure injection, per-policy rollback
// and recovery timing, and exact wall-clock accounting
// (useful + stall + recovery + idle == wall).
inline Metrics run_simulation(const SimConfig& cfg) {
  const auto ops = cfg.model.operators();
  const double t_iter = iteration_time(cfg.profile, cfg.parallel);
  if (t_iter <= 0) throw std::invalid_argument("simulation: t_iter must be > 0");
  const double pcie = cfg.cluster.pcie_bandwidth;
  const int32_t stages = cfg.parallel.pp_stages;
  const int64_t tokens_per_iter =
      cfg.parallel.global_batch * cfg.model.tokens_per_sample;

  int64_t dense_bytes = 0;
  for (const auto& op : ops)
    dense_bytes += op.param_count * cfg.precision.full_state_bytes();

  PopularityVector pop = cfg.popularity;
  if (pop.p.empty())
    pop.p.assign(cfg.model.experts_per_layer,
                 1.0 / cfg.model.experts_per_layer);

  Rng rng(cfg.seed);
  Rng victim_rng = rng.substream("victims");
  Rng failure_rng = rng.substream("failures");

  Metrics m;
  m.model = cfg.model.name;
  m.policy = policy_name(cfg.policy.kind);
  m.mtbf_s = cfg.failures.kind == FailureProcess::Kind::Poisson
                 ? cfg.failures.mtbf
                 : (cfg.failures.trace.events.empty()
                        ? 0
                        : cfg.horizon / cfg.failures.trace.events.size());
  m.t_iter = t_iter;

  // --- policy setup -------------------------------------------------------
  SparseSchedule sched;
  std::vector<int64_t> slot_bytes;
  int64_t interval = 1;
  MocState moc;
  std::vector<std::deque<int64_t>> moc_snap_history;  // per expert index
  int64_t moc_bytes_fixed = 0;  // non-expert + gate payload per iteration

  switch (cfg.policy.kind) {
    case PolicyKind::Sparse: {
      sched = build_schedule(ops, cfg.precision, pcie, t_iter, cfg.policy.ordering);
      for (size_t i = 0; i < sched.slots.size(); ++i)
        slot_bytes.push_back(sched.slot_bytes(i, ops, cfg.precision));
      m.wsparse_or_interval = static_cast<double>(sched.wsparse);
      break;
    }
    case PolicyKind::Gemini: {
      if (cfg.policy.fixed_interval > 0) {
        interval = cfg.policy.fixed_interval;
      } else {
        const double snap = dense_bytes / pcie;
        const double stall_per_ckpt = std::max(0.0, snap - t_iter);
        const double mtbf_for_oracle = m.mtbf_s > 0 ? m.mtbf_s : cfg.horizon;
        interval = oracle_interval(stall_per_ckpt, t_iter, mtbf_for_oracle);
      }
      m.wsparse_or_interval = static_cast<double>(interval);
      break;
    }
    case PolicyKind::CheckFreq: {
      if (cfg.policy.fixed_interval > 0) {
        interval = cfg.policy.fixed_interval;
      } else {
        const double persist = dense_bytes / cfg.cluster.persist_bandwidth;
        interval = checkfreq_interval(persist, t_iter, cfg.policy.checkfreq_cap);
      }
      m.wsparse_or_interval = static_cast<double>(interval);
      break;
    }
    case PolicyKind::Moc: {
      moc.experts_per_layer = cfg.model.experts_per_layer;
      moc.k = cfg.policy.moc_initial_k > 0
                  ? cfg.policy.moc_initial_k
                  : std::max(1, cfg.model.experts_per_layer / 8);
      moc.lost_token_budget_fraction = cfg.policy.moc_budget_fraction;
      moc_snap_history.assign(cfg.model.experts_per_layer, {});
      for (auto& h : moc_snap_history) h.push_back(0);
      for (const auto& op : ops)
        if (!op.is_expert())
          moc_bytes_fixed += op.param_count * cfg.precision.full_state_bytes();
      m.wsparse_or_interval = 1;
      break;
    }
  }

  const int64_t expert_full_bytes =
      cfg.model.derived_expert_params() * cfg.precision.full_state_bytes();

  // payload snapshotted during iteration state+1 (carrying `state`); pure
  auto peek_payload_bytes = [&](int64_t state) -> int64_t {
    switch (cfg.policy.kind) {
      case PolicyKind::Sparse:
        return slot_bytes[static_cast<size_t>(state % sched.wsparse)];
      case PolicyKind::Gemini:
      case PolicyKind::CheckFreq:
        return (state > 0 && state % interval == 0) ? dense_bytes : 0;
      case PolicyKind::Moc:
        return moc_bytes_fixed +
               static_cast<int64_t>(moc.k) * cfg.model.layers * expert_full_bytes;
    }
    return 0;
  };

  // committed only when the carrying iteration completes
  auto commit_snapshot = [&](int64_t state) {
    if (cfg.policy.kind != PolicyKind::Moc) return;
    const auto subset = moc_step(moc);
    for (int32_t j : subset) {
      auto& h = moc_snap_history[j];
      h.push_back(state);
      if (h.size() > 12) h.pop_front();
    }
  };

  // replication pipe (CheckFreq persists to storage instead)
  detail::DrainQueue pipe;
  pipe.bandwidth = cfg.policy.kind == PolicyKind::CheckFreq
                       ? cfg.cluster.persist_bandwidth
                       : cfg.cluster.replication_bandwidth;
  const double repl_factor =
      cfg.policy.kind == PolicyKind::CheckFreq ? 1.0 : cfg.replication_r;

  detail::PersistedTracker persisted;  // per-record persistence frontier

  // localized replay cost of one iteration for a failed segment
  auto replay_cost = [&](int32_t seg_lo, int32_t seg_hi) -> double {
    if (!cfg.policy.upstream_logging || cfg.profile.t_stage.empty())
      return t_iter;
    double worst = 0;
    for (int32_t s = seg_lo; s <= seg_hi; ++s)
      worst = std::max(worst, cfg.profile.t_stage.at(s));
    const int32_t len = seg_hi - seg_lo + 1;
    return (cfg.parallel.microbatches + len - 1) * worst + cfg.profile.t_update;
  };

  // conversion compute discount: frozen operators skip ~1/3 of their work;
  // averaged over the window the replay runs at (1 - savings) of full cost.
  auto conversion_discount = [&]() -> double {
    if (!cfg.policy.conversion_compute_savings) return 1.0;
    double frozen_share = 0;  // mean fraction of frozen compute over steps
    const int64_t w = sched.wsparse;
    for (int64_t k = 0; k < w; ++k)
      frozen_share += static_cast<double>(w - 1 - k) / w;
    frozen_share /= w;
    return 1.0 - frozen_share / 3.0;
  };

  // --- failure sources ----------------------------------------------------
  size_t trace_pos = 0;
  auto next_trace_event = [&]() -> std::optional<FailureEvent> {
    if (cfg.failures.kind != FailureProcess::Kind::Trace) return std::nullopt;
    if (trace_pos >= cfg.failures.trace.events.size()) return std::nullopt;
    return cfg.failures.trace.events[trace_pos];
  };
  double next_poisson = cfg.failures.kind == FailureProcess::Kind::Poisson
                            ? failure_rng.exponential(cfg.failures.mtbf)
                            : std::numeric_limits<double>::infinity();

  auto stage_of_node = [&](int32_t node) -> int32_t {
    return stages > 0 ? node % stages : 0;
  };

  // --- main loop ----------------------------------------------------------
  double useful = 0, stall_total = 0, recovery_total = 0, idle_total = 0;
  int64_t state = 0;  // completed iterations
  double wall = 0;

  std::map<int64_t, double> goodput_buckets;  // bucket index -> samples
  auto credit_goodput = [&](double t, double samples) {
    goodput_buckets[static_cast<int64_t>(t / cfg.goodput_bucket)] += samples;
  };

  m.policy_trajectory.emplace_back(
      0.0, cfg.policy.kind == PolicyKind::Moc ? moc.k : m.wsparse_or_interval);

  persisted.add(0, 0.0);  // training starts from a persisted dense checkpoint

  while (wall < cfg.horizon) {
    const int64_t k = state + 1;  // iteration being executed
    const int64_t snap_bytes = peek_payload_bytes(state);
    const double snap_time = snap_bytes > 0 ? snap_bytes / pcie : 0.0;
    const double stall_k = std::max(0.0, snap_time - t_iter);
    const double t_eff = t_iter + stall_k;

    // earliest failure hitting this iteration
    double fail_at = std::numeric_limits<double>::infinity();
    int32_t fail_node = -1;
    bool from_trace = false;
    if (auto e = next_trace_event(); e && e->t < wall + t_eff) {
      fail_at = std::max(e->t, wall);
      fail_node = e->node;
      from_trace = true;
    }
    if (next_poisson < wall + t_eff && next_poisson < fail_at) {
      fail_at = next_poisson;
      fail_node = static_cast<int32_t>(
          victim_rng.uniform_index(std::max(cfg.cluster.nodes, 1)));
      from_trace = false;
    }

    if (fail_at >= wall + t_eff) {
      // clean iteration
      wall += t_eff;
      useful += t_iter;
      stall_total += stall_k;
      commit_snapshot(state);
      state = k;
      m.iterations += 1;
      credit_goodput(wall, static_cast<double>(cfg.parallel.global_batch));
      if (snap_bytes > 0)
        persisted.add(state - 1, pipe.push(wall, snap_bytes * repl_factor));
      continue;
    }

    // --- failure ---------------------------------------------------------
    m.failures += 1;
    if (from_trace) trace_pos += 1;
    const double partial = fail_at - wall;
    recovery_total += partial;
    double event_recovery = partial;
    wall = fail_at;

    int32_t seg_lo = stage_of_node(fail_node);
    int32_t seg_hi = seg_lo;

    bool recovering = true;
    while (recovering) {
      idle_total += cfg.detection_delay + cfg.t_restart;
      wall += cfg.detection_delay + cfg.t_restart;

      const int64_t frontier = persisted.query(wall);
      double recompute = 0;
      int64_t resume_state = state;
      switch (cfg.policy.kind) {
        case PolicyKind::Sparse: {
          const int64_t w = sched.wsparse;
          // newest persisted aligned window [a, a+w)
          const int64_t a = frontier >= w - 1 ? (frontier - (w - 1)) / w * w : -1;
          if (a < 0) {
            // no complete window yet: global restart from the initial state
            recompute = static_cast<double>(state) * t_iter;
            resume_state = state;
            m.checkpoint_never_persisted = true;
          } else {
            const int64_t target = a + w;
            const int64_t catchup = std::max<int64_t>(0, state - target);
            const double per_iter =
                replay_cost(seg_lo, seg_hi) * conversion_discount();
            recompute = (w + catchup) * per_iter;
            resume_state = std::max(state, target);
          }
          break;
        }
        case PolicyKind::Gemini:
        case PolicyKind::CheckFreq: {
          const int64_t c = frontier / interval * interval;
          recompute = static_cast<double>(state - c) * t_iter;
          resume_state = state;
          break;
        }
        case PolicyKind::Moc: {
          const int64_t c = frontier;
          recompute = static_cast<double>(state - c) * t_iter;
          resume_state = state;
          // stale experts revert; their recent tokens are lost
          double lost = 0;
          for (int32_t j = 0; j < cfg.model.experts_per_layer; ++j) {
            int64_t last = 0;
            for (auto it = moc_snap_history[j].rbegin();
                 it != moc_snap_history[j].rend(); ++it) {
              if (*it <= c) {
                last = *it;
                break;
              }
            }
            lost += pop.p[j] * static_cast<double>(c - last) *
                    static_cast<double>(tokens_per_iter);
          }
          moc.tokens_processed = static_cast<double>(state) *
                                 static_cast<double>(tokens_per_iter);
          moc_on_failure(moc, lost);
          m.tokens_lost = moc.tokens_lost;
          m.policy_trajectory.emplace_back(wall, moc.k);
          break;
        }
      }

      // cascading failures land during the recompute phase (trace mode)
      const double rec_end = wall + recompute;
      auto e = next_trace_event();
      if (e && e->t < rec_end) {
        trace_pos += 1;
        m.failures += 1;
        const double et = std::max(e->t, wall);
        recovery_total += et - wall;
        event_recovery += et - wall;
        wall = et;
        const int32_t s = stage_of_node(e->node);
        seg_lo = std::min(seg_lo, s);
        seg_hi = std::max(seg_hi, s);
        continue;  // joint recovery restarts
      }

      recovery_total += recompute;
      event_recovery += recompute;
      m.recovery_recompute_s += recompute;
      wall = rec_end;
      state = resume_state;
      recovering = false;
    }

    m.max_recovery_event_s = std::max(m.max_recovery_event_s, event_recovery);
    m.mean_recovery_event_s += event_recovery;
    if (cfg.failures.kind == FailureProcess::Kind::Poisson)
      next_poisson = wall + failure_rng.exponential(cfg.failures.mtbf);
  }

  if (m.failures > 0) m.mean_recovery_event_s /= static_cast<double>(m.failures);

  m.useful_s = useful;
  m.stall_s = stall_total;
  m.recovery_s = recovery_total;
  m.idle_s = idle_total;
  m.wall_s = useful + stall_total + recovery_total + idle_total;
  m.ettr = m.wall_s > 0 ? useful / m.wall_s : 1.0;
  m.recovery_total_s = recovery_total;
  m.overhead_s_per_iter =
      m.iterations > 0 ? stall_total / static_cast<double>(m.iterations) : 0.0;
  m.overhead_pct = t_iter > 0 ? m.overhead_s_per_iter / t_iter : 0.0;
  if (cfg.policy.kind == PolicyKind::Moc) m.tokens_lost = moc.tokens_lost;

  const int64_t last_bucket =
      static_cast<int64_t>(m.wall_s / cfg.goodput_bucket);
  std::map<int64_t, double> k_by_bucket;  // MoC staircase, per bucket
  for (const auto& [t, k] : m.policy_trajectory)
    k_by_bucket[static_cast<int64_t>(t / cfg.goodput_bucket)] = k;
  double k_now = m.policy_trajectory.front().second;
  for (int64_t b = 0; b <= last_bucket; ++b) {
    GoodputPoint gp;
    gp.bucket_start = static_cast<double>(b) * cfg.goodput_bucket;
    auto it = goodput_buckets.find(b);
    gp.samples_per_s =
        it == goodput_buckets.end() ? 0.0 : it->second / cfg.goodput_bucket;
    if (auto kit = k_by_bucket.find(b); kit != k_by_bucket.end())
      k_now = kit->second;
    if (cfg.policy.kind == PolicyKind::Moc)
      gp.moc_expert_fraction = k_now / cfg.model.experts_per_layer;
    m.goodput.push_back(gp);
  }
  return m;
}

// === sweeps ===============================================================

struct SweepRequest {
  std::vector<SimConfig> configs;       // base configs (model + cluster + ...)
  std::vector<double> mtbf_list;        // seconds; empty = keep config process
  std::vector<PolicyKind> policies;
  int32_t seeds = 1;
};

// Cartesian product of configs x MTBFs x policies. Runs share the failure
// seed across policies at the same (config, mtbf, repetition) so policies
// face identical failure processes.
inline std::vector<Metrics> sweep(const SweepRequest& req) {
  std::vector<Metrics> rows;
  for (size_t ci = 0; ci < req.configs.size(); ++ci) {
    const std::vector<double> mtbfs =
        req.mtbf_list.empty() ? std::vector<double>{req.configs[ci].failures.mtbf}
                              : req.mtbf_list;
    for (double mtbf : mtbfs) {
      for (int32_t rep = 0; rep < req.seeds; ++rep) {
        for (PolicyKind pk : req.policies) {
          SimConfig cfg = req.configs[ci];
          cfg.policy.kind = pk;
          if (cfg.failures.kind == FailureProcess::Kind::Poisson)
            cfg.failures.mtbf = mtbf;
          cfg.seed = Rng(req.configs[ci].seed)
                         .substream(cfg.model.name, static_cast<uint64_t>(
                                                        mtbf * 1000 + rep))
                         .next_u64();
          try {
            rows.push_back(run_simulation(cfg));
          } catch (const std::exception& e) {
            Metrics failed;
            failed.model = cfg.model.name;
            failed.policy = policy_name(pk);
            failed.mtbf_s = mtbf;
            failed.error = e.what();
            rows.push_back(failed);
          }
        }
      }
    }
  }
  return rows;
}

}  // namespace moelab
