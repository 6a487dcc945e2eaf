// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "moelab/core.hpp"
#include "moelab/engine.hpp"
#include "moelab/snapshot.hpp"

namespace moelab {

// === recovery scope =======================================================

struct Worker {
  int32_t pipeline = 0;
  int32_t stage = 0;
  auto operator<=>(const Worker&) const = default;
};

// A maximal contiguous run of failed stages within one data-parallel
// pipeline; boundary tensors come from the healthy neighbours, or from the
// raw data stream / loss head if the segment touches a pipeline end.
struct RecoverySegment {
  int32_t pipeline = 0;
  int32_t stage_lo = 0;
  int32_t stage_hi = 0;
  std::optional<int32_t> upstream_log_owner;    // stage feeding activations
  std::optional<int32_t> downstream_log_owner;  // stage feeding gradients

  bool adjacent_or_overlapping(const RecoverySegment& o) const {
    if (pipeline != o.pipeline) return false;
    return !(o.stage_lo > stage_hi + 1 || o.stage_hi < stage_lo - 1);
  }
};

struct RecoveryScope {
  std::vector<RecoverySegment> segments;  // disjoint; recover in parallel
};

namespace detail {

inline void set_boundaries(RecoverySegment& seg, int32_t stages) {
  seg.upstream_log_owner =
      seg.stage_lo > 0 ? std::optional<int32_t>(seg.stage_lo - 1) : std::nullopt;
  seg.downstream_log_owner = seg.stage_hi < stages - 1
                                 ? std::optional<int32_t>(seg.stage_hi + 1)
                                 : std::nullopt;
}

}  // namespace detail

// Groups failed workers into maximal contiguous pipeline segments per DP
// group. A failure adjacent to or inside an ongoing recovery merges into it
// (that joint recovery restarts); disjoint failures recover independently.
inline RecoveryScope recovery_scope(const std::vector<Worker>& failed,
                                    const ParallelPlan& plan,
                                    const RecoveryScope* ongoing = nullptr) {
  for (const auto& w : failed) {
    if (w.pipeline < 0 || w.pipeline >= plan.dp_degree || w.stage < 0 ||
        w.stage >= plan.pp_stages)
      throw std::invalid_argument("recovery_scope: unknown worker (pipeline " +
                                  std::to_string(w.pipeline) + ", stage " +
                                  std::to_string(w.stage) + ")");
  }

  std::vector<RecoverySegment> segs;
  if (ongoing) segs = ongoing->segments;
  for (const auto& w : failed) {
    RecoverySegment s;
    s.pipeline = w.pipeline;
    s.stage_lo = s.stage_hi = w.stage;
    segs.push_back(s);
  }

  // merge until fixpoint
  bool merged = true;
  while (merged) {
    merged = false;
    for (size_t i = 0; i < segs.size() && !merged; ++i) {
      for (size_t j = i + 1; j < segs.size() && !merged; ++j) {
        if (segs[i].adjacent_or_overlapping(segs[j])) {
          segs[i].stage_lo = std::min(segs[i].stage_lo, segs[j].stage_lo);
          segs[i].stage_hi = std::max(segs[i].stage_hi, segs[j].stage_hi);
          segs.erase(segs.begin() + j);
          merged = true;
        }
      }
    }
  }

  std::sort(segs.begin(), segs.end(), [](const auto& a, const auto& b) {
    return std::tie(a.pipeline, a.stage_lo) < std::tie(b.pipeline, b.stage_lo);
  });
  RecoveryScope scope;
  for (auto& s : segs) {
    detail::set_boundaries(s, plan.pp_stages);
    scope.segments.push_back(s);
  }
  return scope;
}

// === sparse-to-dense conversion ==========================================

// One conversion step: which record to load, which iteration to replay, and
// which operators flip Frozen -> Active when the record lands.
struct ConversionStep {
  uint32_t record_index = 0;
  uint64_t replay_iteration = 0;
  std::vector<uint32_t> activating;
};

struct ConversionPlan {
  uint64_t window_start = 0;
  std::vector<ConversionStep> steps;
};

inline ConversionPlan conversion_plan(const SparseCheckpoint& ckpt,
                                      const PrecisionPlan& plan) {
  ConversionPlan cp;
  cp.window_start = ckpt.window_start;
  for (uint32_t k = 0; k < ckpt.wsparse; ++k) {
    ConversionStep step;
    step.record_index = k;
    step.replay_iteration = ckpt.window_start + k + 1;
    const ParsedRecord pr = parse_record(ckpt.blobs.at(k), plan);
    for (const auto& [id, p] : pr.record.entries)
      if (p.mode == SnapshotMode::Full) step.activating.push_back(id);
    cp.steps.push_back(std::move(step));
  }
  return cp;
}

namespace detail {

// Load one record's payloads into the scratch operator vector, restricted to
// `in_scope`. Full payloads activate the operator; compute-only payloads
// refresh the reduced-precision image frozen operators run on.
template <typename ScopePred>
inline void load_record(std::vector<OperatorState>& ops, const ParsedRecord& pr,
                        int compute_bytes, ScopePred in_scope) {
  for (const auto& [id, p] : pr.record.entries) {
    if (!in_scope(id)) continue;
    auto& op = ops.at(id);
    if (p.mode == SnapshotMode::Full) {
      op.master = p.master;
      op.m = p.m;
      op.v = p.v;
      op.step = p.step;
      op.has_full_state = true;
      op.refresh_compute(compute_bytes);
    } else if (!op.has_full_state) {
      op.compute = p.compute;
    }
  }
}

inline ParsedRecord parse_checked(const SparseCheckpoint& ckpt, uint32_t k,
                                  const PrecisionPlan& plan) {
  try {
    return parse_record(ckpt.blobs.at(k), plan);
  } catch (const std::exception& e) {
    throw std::runtime_error("sparse checkpoint record (slot " +
                             std::to_string(k) + "): " + e.what());
  }
}

}  // namespace moelab::detail

// Rebuild the dense checkpoint at iteration window_start + W by loading the
// window's records in slot order and replaying the micro-batches between
// them. Operators transition from frozen to active as their full state
// lands; the final state is bit-identical to a dense checkpoint taken from
// an uninterrupted run.
inline TrainState sparse_to_dense_convert(Engine& engine,
                                          const SparseCheckpoint& ckpt) {
  const PrecisionPlan& plan = engine.config().precision;
  const int compute_bytes = static_cast<int>(plan.compute_bytes);
  if (!ckpt.complete())
    throw std::runtime_error("sparse checkpoint incomplete: " +
                             std::to_string(ckpt.blobs.size()) + " of " +
                             std::to_string(ckpt.wsparse) + " records");

  const size_t op_count = engine.operators().size();

  // Degenerate window: the single record already is a dense checkpoint.
  if (ckpt.wsparse == 1) {
    const ParsedRecord pr = detail::parse_checked(ckpt, 0, plan);
    TrainState st;
    st.iteration = pr.record.iteration;
    st.data_seed = pr.record.data_seed;
    st.ops.resize(op_count);
    detail::load_record(st.ops, pr, compute_bytes, [](uint32_t) { return true; });
    return st;
  }

  TrainState st;
  st.iteration = ckpt.window_start;
  st.data_seed = engine.state().data_seed;
  st.ops.resize(op_count);

  std::map<uint32_t, OperatorMode> modes;
  for (uint32_t id = 0; id < op_count; ++id) modes[id] = OperatorMode::Frozen;

  for (uint32_t k = 0; k < ckpt.wsparse; ++k) {
    const ParsedRecord pr = detail::parse_checked(ckpt, k, plan);
    detail::load_record(st.ops, pr, compute_bytes,
                        [](uint32_t) { return true; });
    for (uint32_t id = 0; id < op_count; ++id)
      if (st.ops[id].has_full_state) modes[id] = OperatorMode::Active;
    const uint64_t replay_it = ckpt.window_start + k + 1;
    engine.replay_scoped_iteration(st.ops, replay_it, 0,
                                   engine.stages() - 1, &modes, nullptr);
    st.iteration = replay_it;
  }

  for (uint32_t id = 0; id < op_count; ++id)
    if (!st.ops[id].has_full_state)
      throw std::runtime_error("conversion finished with frozen operator " +
                               std::to_string(id));
  return st;
}

// === localized recovery ===================================================

struct LocalizedRecoveryResult {
  // recovered operator states, keyed by id (scope operators only)
  std::map<uint32_t, OperatorState> ops;
  uint64_t iteration = 0;
};

// Rebuild only the scope's stages: conversion replay plus re-execution of
// the lost iterations, with boundary activations and gradients read from
// the neighbours' logs instead of running out-of-scope stages.
inline LocalizedRecoveryResult localized_recover(Engine& engine,
                                                 const RecoverySegment& seg,
                                                 const SparseCheckpoint& ckpt,
                                                 const UpstreamLog& logs,
                                                 uint64_t target_iteration) {
  const PrecisionPlan& plan = engine.config().precision;
  const int compute_bytes = static_cast<int>(plan.compute_bytes);
  const size_t op_count = engine.operators().size();
  if (!ckpt.complete())
    throw std::runtime_error("sparse checkpoint incomplete");

  auto in_scope = [&](uint32_t id) {
    const int32_t s = engine.stage_of_op(id);
    return s >= seg.stage_lo && s <= seg.stage_hi;
  };

  std::vector<OperatorState> ops(op_count);
  std::map<uint32_t, OperatorMode> modes;
  for (uint32_t id = 0; id < op_count; ++id)
    if (in_scope(id)) modes[id] = OperatorMode::Frozen;

  uint64_t iteration = ckpt.window_start;
  for (uint32_t k = 0; k < ckpt.wsparse; ++k) {
    const ParsedRecord pr = detail::parse_checked(ckpt, k, plan);
    detail::load_record(ops, pr, compute_bytes, in_scope);
    for (auto& [id, mode] : modes)
      if (ops[id].has_full_state) mode = OperatorMode::Active;
    iteration = ckpt.window_start + k + 1;
    engine.replay_scoped_iteration(ops, iteration, seg.stage_lo, seg.stage_hi,
                                   &modes, &logs);
  }

  for (auto& [id, mode] : modes)
    if (mode != OperatorMode::Active)
      throw std::runtime_error("localized recovery left operator " +
                               std::to_string(id) + " frozen");

  // lost iterations after the window, still from logs
  while (iteration < target_iteration) {
    iteration += 1;
    engine.replay_scoped_iteration(ops, iteration, seg.stage_lo, seg.stage_hi,
                                   &modes, &logs);
  }

  LocalizedRecoveryResult out;
  out.iteration = iteration;
  for (uint32_t id = 0; id < op_count; ++id)
    if (in_scope(id)) out.ops.emplace(id, std::move(ops[id]));
  return out;
}

// === log storage budget ===================================================

// Worst-case retained boundary-log footprint: the live window plus the one
// being converted into a persisted checkpoint, both directions, every
// micro-batch of every pipeline.
inline int64_t upstream_log_bytes(const ModelSpec& model,
                                  const ParallelPlan& plan, int64_t wsparse) {
  const int64_t boundaries = std::max(0, plan.pp_stages - 1);
  const int64_t per_tensor =
      plan.microbatch_size * model.token_dim * static_cast<int64_t>(sizeof(float));
  const int64_t entries_per_iter =
      2 * boundaries * plan.microbatches * plan.dp_degree;
  return 2 * wsparse * entries_per_iter * per_tensor;
}

// Host-memory bound check; a configured budget that cannot hold two windows
// of logs is a configuration error.
inline void check_log_budget(const ModelSpec& model, const ParallelPlan& plan,
                             int64_t wsparse, const ClusterSpec& cluster) {
  if (cluster.cpu_mem_per_node <= 0) return;
  const int64_t need = upstream_log_bytes(model, plan, wsparse);
  const double have = cluster.cpu_mem_per_node * cluster.nodes;
  if (static_cast<double>(need) > have)
    throw std::invalid_argument(
        "upstream log budget exceeded: need " + std::to_string(need) +
        " bytes of host memory, budget " + std::to_string(static_cast<int64_t>(have)));
}

// === recovery time bounds =================================================

struct RecoveryBounds {
  double min_seconds = 0.0;
  double max_seconds = 0.0;
  double expected_seconds = 0.0;
};

// Sparse: replay W iterations, then up to W more; dense: up to one interval.
inline RecoveryBounds recovery_time_bounds_sparse(double wsparse, double t_iter) {
  return {0.0, 2.0 * wsparse * t_iter, 1.5 * wsparse * t_iter};
}

inline RecoveryBounds recovery_time_bounds_dense(double interval, double t_iter) {
  return {0.0, interval * t_iter, 0.5 * interval * t_iter};
}

}  // namespace moelab
