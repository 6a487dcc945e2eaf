// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "moelab/core.hpp"

namespace moelab {

// === operator ordering ===================================================

enum class OrderingScheme : uint8_t {
  HardCount = 0,   // activation counts
  SoftCount = 1,   // summed gating probabilities
  TimeDecayed = 2, // exponential moving average of counts
  CapacityAware = 3,
};

inline OrderingScheme ordering_from_string(const std::string& s) {
  if (s == "hard") return OrderingScheme::HardCount;
  if (s == "soft") return OrderingScheme::SoftCount;
  if (s == "decay") return OrderingScheme::TimeDecayed;
  if (s == "capacity") return OrderingScheme::CapacityAware;
  throw std::invalid_argument("unknown ordering scheme: " + s);
}

// Time-decayed activation count update: A(t) = alpha*A(t-1) + (1-alpha)*batch.
inline double time_decayed_update(double prev, double batch_count, double alpha) {
  return alpha * prev + (1.0 - alpha) * batch_count;
}

// Ascending-popularity order. Experts sort by the scheme's score (ties by
// operator id); non-expert and gate operators go after all experts, so their
// full snapshots land in the last slots of the window.
inline std::vector<uint32_t> order_operators(
    const std::vector<OperatorDescriptor>& ops, OrderingScheme scheme) {
  auto score = [&](const OperatorDescriptor& op) -> double {
    switch (scheme) {
      case OrderingScheme::HardCount:
        return op.popularity.hard_count;
      case OrderingScheme::SoftCount:
        return op.popularity.soft_count;
      case OrderingScheme::TimeDecayed:
        return op.popularity.ema;
      case OrderingScheme::CapacityAware:
        if (op.capacity <= 0)
          throw std::invalid_argument("capacity-aware ordering: operator " +
                                      std::to_string(op.id) + " has no capacity");
        return op.popularity.hard_count / op.capacity;
    }
    return 0.0;
  };

  std::vector<uint32_t> experts, rest;
  for (const auto& op : ops)
    (op.is_expert() ? experts : rest).push_back(op.id);

  std::vector<double> scores(ops.size(), 0.0);
  for (const auto& op : ops)
    if (op.is_expert()) scores[op.id] = score(op);

  std::sort(experts.begin(), experts.end(), [&](uint32_t a, uint32_t b) {
    if (scores[a] != scores[b]) return scores[a] < scores[b];
    return a < b;
  });
  // non-experts and gates keep id order (layer-major, block before gate)
  std::sort(rest.begin(), rest.end());

  std::vector<uint32_t> out;
  out.reserve(ops.size());
  out.insert(out.end(), experts.begin(), experts.end());
  out.insert(out.end(), rest.begin(), rest.end());
  return out;
}

// === window sizing ========================================================

struct WindowSize {
  int64_t wsparse = 1;
  int64_t o_active = 0;
  bool fits_budget = true;  // false: even the floor exceeds the budget
};

// Smallest window whose per-iteration snapshot fits inside one iteration.
// Starts with everything active and freezes operators one at a time until
// (S_Master+S_Optim)*O_Active + S_Compute*O_Frozen transfers within T_iter.
// Mean per-operator sizes are used; heterogeneous configurations get an
// exact-fit validation pass in build_schedule.
inline WindowSize find_window_size(int64_t o_total, double mean_full_bytes,
                                   double mean_compute_bytes, double pcie_bandwidth,
                                   double t_iter, bool allow_single = false) {
  if (pcie_bandwidth <= 0 || t_iter <= 0)
    throw std::invalid_argument("find_window_size: non-positive budget");
  if (o_total <= 0) throw std::invalid_argument("find_window_size: no operators");

  const double budget = pcie_bandwidth * t_iter;
  const int64_t floor_active = allow_single ? 1 : 2;
  int64_t o_active = o_total;
  while (o_active > floor_active) {
    const int64_t o_frozen = o_total - o_active;
    const double ckpt_size =
        mean_full_bytes * static_cast<double>(o_active) +
        mean_compute_bytes * static_cast<double>(o_frozen);
    if (ckpt_size <= budget) break;  // checkpoint fits within iter time
    o_active -= 1;
  }
  WindowSize w;
  w.o_active = o_active;
  w.wsparse = (o_total + o_active - 1) / o_active;
  const double floor_size =
      mean_full_bytes * static_cast<double>(o_active) +
      mean_compute_bytes * static_cast<double>(o_total - o_active);
  w.fits_budget = floor_size <= budget;
  return w;
}

// === schedule =============================================================

struct SparseSchedule {
  int64_t wsparse = 1;
  int64_t o_active = 0;
  OrderingScheme ordering = OrderingScheme::HardCount;
  uint64_t created_iteration = 0;
  std::vector<ScheduleSlot> slots;
  bool fits_budget = true;

  int64_t slot_bytes(size_t i, const std::vector<OperatorDescriptor>& ops,
                     const PrecisionPlan& plan) const {
    int64_t b = 0;
    for (uint32_t id : slots[i].active)
      b += ops[id].param_count * plan.full_state_bytes();
    for (uint32_t id : slots[i].compute_only)
      b += ops[id].param_count * plan.compute_bytes;
    return b;
  }
  int64_t max_slot_bytes(const std::vector<OperatorDescriptor>& ops,
                         const PrecisionPlan& plan) const {
    int64_t m = 0;
    for (size_t i = 0; i < slots.size(); ++i)
      m = std::max(m, slot_bytes(i, ops, plan));
    return m;
  }
};

// Slot i holds ordered[i*O_Active : (i+1)*O_Active] as its active set and
// everything after as compute-only; the last slot may be short.
inline SparseSchedule generate_schedule(const std::vector<uint32_t>& ordered,
                                        int64_t wsparse, int64_t o_active,
                                        OrderingScheme ordering) {
  if (ordered.empty())
    throw std::invalid_argument("generate_schedule: empty operator list");
  SparseSchedule s;
  s.wsparse = wsparse;
  s.o_active = o_active;
  s.ordering = ordering;
  const int64_t n = static_cast<int64_t>(ordered.size());
  for (int64_t i = 0; i < wsparse; ++i) {
    ScheduleSlot slot;
    const int64_t start = i * o_active;
    const int64_t end = std::min(start + o_active, n);
    slot.active.assign(ordered.begin() + start, ordered.begin() + end);
    slot.compute_only.assign(ordered.begin() + end, ordered.end());
    s.slots.push_back(std::move(slot));
  }
  return s;
}

// Full policy pass: mean-size window search, ordering, then an exact-size
// validation that grows the window until every generated slot fits the
// budget (heterogeneous operators can overflow a slot the mean admits).
inline SparseSchedule build_schedule(const std::vector<OperatorDescriptor>& ops,
                                     const PrecisionPlan& plan,
                                     double pcie_bandwidth, double t_iter,
                                     OrderingScheme ordering,
                                     bool allow_single = false) {
  const int64_t n = static_cast<int64_t>(ops.size());
  double total_full = 0, total_compute = 0;
  for (const auto& op : ops) {
    total_full += static_cast<double>(op.param_count * plan.full_state_bytes());
    total_compute += static_cast<double>(op.param_count * plan.compute_bytes);
  }
  WindowSize w = find_window_size(n, total_full / n, total_compute / n,
                                  pcie_bandwidth, t_iter, allow_single);

  const std::vector<uint32_t> ordered = order_operators(ops, ordering);
  const double budget = pcie_bandwidth * t_iter;

  int64_t wsparse = w.wsparse;
  int64_t o_active = w.o_active;
  SparseSchedule sched;
  for (;;) {
    sched = generate_schedule(ordered, wsparse, o_active, ordering);
    sched.fits_budget = w.fits_budget;
    if (static_cast<double>(sched.max_slot_bytes(ops, plan)) <= budget) break;
    if (o_active <= (allow_single ? 1 : 2) || wsparse >= n) {
      sched.fits_budget = false;  // checkpointing will stall
      break;
    }
    wsparse += 1;
    o_active = (n + wsparse - 1) / wsparse;
  }
  return sched;
}

// === drift detection ======================================================

// True when at least a quarter of the experts moved their activation
// frequency by more than 10% relative.
inline bool detect_drift(const std::vector<double>& old_counts,
                         const std::vector<double>& new_counts,
                         double change_threshold = 0.10,
                         double fraction_threshold = 0.25) {
  if (old_counts.size() != new_counts.size())
    throw std::invalid_argument("detect_drift: mismatched expert sets");
  if (old_counts.empty()) return false;
  size_t changed = 0;
  for (size_t i = 0; i < old_counts.size(); ++i) {
    double rel;
    if (old_counts[i] == 0.0) {
      rel = new_counts[i] == 0.0 ? 0.0 : 1.0;
    } else {
      rel = std::abs(new_counts[i] - old_counts[i]) / std::abs(old_counts[i]);
    }
    if (rel > change_threshold) ++changed;
  }
  return static_cast<double>(changed) >=
         fraction_threshold * static_cast<double>(old_counts.size());
}

// Drift-triggered reschedules take effect at the next window boundary so the
// in-flight window keeps its one-full-snapshot-per-operator coverage.
inline uint64_t reschedule_effective_iteration(uint64_t current_iteration,
                                               int64_t wsparse) {
  return (current_iteration / wsparse + 1) * static_cast<uint64_t>(wsparse);
}

// === baseline policies ====================================================

// Smallest interval keeping amortized persist cost under cap*T_iter.
inline int64_t checkfreq_interval(double persist_seconds, double t_iter,
                                  double overhead_cap) {
  if (overhead_cap <= 0 || overhead_cap > 1)
    throw std::invalid_argument("checkfreq: cap must be in (0, 1]");
  if (persist_seconds <= 0) return 1;
  const double raw = persist_seconds / (overhead_cap * t_iter);
  if (raw > 1e6)
    throw std::runtime_error("checkfreq: no interval <= 1e6 satisfies the cap");
  return std::max<int64_t>(1, static_cast<int64_t>(std::ceil(raw)));
}

// ETTR approximation under Poisson failures (closed form used across the
// project): runtime factor x recovery factor.
inline double analytic_ettr(double t_ckpt, double interval, double t_iter,
                            double expected_recovery, double mtbf) {
  if (mtbf <= 0) throw std::invalid_argument("analytic_ettr: mtbf must be > 0");
  const double runtime = 1.0 / (1.0 + t_ckpt / (t_iter * interval));
  const double recovery = 1.0 / (1.0 + expected_recovery / mtbf);
  return runtime * recovery;
}

// Hindsight interval selection: argmax of the closed-form ETTR with
// E[R] = interval*T_iter/2, ties to the smaller interval.
inline int64_t oracle_interval(double t_ckpt, double t_iter, double mtbf,
                               int64_t i_max = 100000) {
  int64_t best = 1;
  double best_ettr = -1.0;
  for (int64_t i = 1; i <= i_max; ++i) {
    const double e =
        analytic_ettr(t_ckpt, static_cast<double>(i), t_iter,
                      0.5 * static_cast<double>(i) * t_iter, mtbf);
    if (e > best_ettr) {
      best_ettr = e;
      best = i;
    }
    // The curve is unimodal in i; stop once well past the peak.
    if (i > 4 * best && i > 64) break;
  }
  return best;
}

// Round-robin partial-expert policy. K experts per layer snapshot each
// iteration (plus every non-expert/gate operator); failures accrue lost
// tokens against a budget, and exhausting the budget doubles K.
struct MocState {
  int32_t experts_per_layer = 1;
  int32_t k = 1;
  int32_t cursor = 0;  // expert index within layer
  double lost_token_budget_fraction = 0.001;
  double tokens_lost = 0.0;
  double tokens_processed = 0.0;

  double expert_fraction() const {
    return static_cast<double>(k) / experts_per_layer;
  }
};

// Expert indices (within each layer) snapshotted this iteration.
inline std::vector<int32_t> moc_step(MocState& st) {
  std::vector<int32_t> out;
  out.reserve(st.k);
  for (int32_t i = 0; i < st.k; ++i)
    out.push_back((st.cursor + i) % st.experts_per_layer);
  st.cursor = (st.cursor + st.k) % st.experts_per_layer;
  return out;
}

// Accrue this failure's stale-expert token loss; escalate K when cumulative
// loss exceeds the budget consumed so far.
inline void moc_on_failure(MocState& st, double tokens_lost_this_failure) {
  st.tokens_lost += tokens_lost_this_failure;
  const double budget = st.lost_token_budget_fraction * st.tokens_processed;
  if (st.tokens_lost > budget)
    st.k = std::min(st.k * 2, st.experts_per_layer);
}

}  // namespace moelab
