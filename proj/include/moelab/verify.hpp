// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <vector>

#include "moelab/recovery.hpp"
#include "moelab/schedule.hpp"
#include "moelab/snapshot.hpp"

namespace moelab {

// Equivalence matrix for the toy engine: seeds x window positions x checks.
// Each cell replays a failure through the protocol under test and compares
// the result, bit for bit, against a fault-free oracle run.

struct VerifyOptions {
  int32_t seeds = 20;
  int32_t window_positions = 6;
  int64_t wsparse = 3;
  bool check_conversion = true;
  bool check_localized = true;
  bool include_moc = false;
  bool corrupt_snapshot = false;  // test hook: flip a byte in one record
};

struct VerifyCell {
  uint64_t seed = 0;
  uint64_t window_start = 0;
  std::string check;
  bool pass = false;
  std::string detail;
};

struct VerifyReport {
  std::vector<VerifyCell> cells;
  double moc_tokens_lost = 0.0;
  int32_t moc_stale_mismatches = 0;

  bool all_pass() const {
    for (const auto& c : cells)
      if (!c.pass) return false;
    return true;
  }
  int64_t failed() const {
    int64_t n = 0;
    for (const auto& c : cells)
      if (!c.pass) ++n;
    return n;
  }
};

namespace detail {

struct WindowCapture {
  std::map<uint64_t, SparseCheckpoint> windows;
  UpstreamLog log;
};

// Train to `iterations`, taking the slot (s mod W) record after every
// iteration (and for the initial state), grouped into aligned windows.
inline WindowCapture capture_windows(Engine& engine, const SparseSchedule& sched,
                                     uint64_t iterations, bool with_log) {
  WindowCapture cap;
  auto record = [&]() {
    const uint64_t s = engine.state().iteration;
    const uint64_t w = s / sched.wsparse * sched.wsparse;
    const uint32_t slot = static_cast<uint32_t>(s % sched.wsparse);
    auto& ckpt = cap.windows[w];
    if (ckpt.blobs.empty()) {
      ckpt.window_start = w;
      ckpt.wsparse = static_cast<uint32_t>(sched.wsparse);
    }
    ckpt.add_record(take_sparse_snapshot(engine, sched.slots[slot], slot),
                    engine.config().precision);
  };
  record();
  while (engine.state().iteration < iterations) {
    engine.run_iteration(nullptr, with_log ? &cap.log : nullptr);
    record();
  }
  return cap;
}

}  // namespace detail

inline VerifyReport run_verify_matrix(const EngineConfig& base,
                                      const VerifyOptions& opt) {
  VerifyReport report;
  const int64_t w = opt.wsparse;
  const uint64_t last_window = static_cast<uint64_t>(opt.window_positions - 1) * w;
  const uint64_t train_to = last_window + w;

  for (int32_t si = 0; si < opt.seeds; ++si) {
    EngineConfig cfg = base;
    cfg.seed = base.seed + static_cast<uint64_t>(si);

    Engine engine(cfg);
    const auto ordered =
        order_operators(engine.operators(), OrderingScheme::HardCount);
    const int64_t o_active =
        (static_cast<int64_t>(ordered.size()) + w - 1) / w;
    const SparseSchedule sched =
        generate_schedule(ordered, w, o_active, OrderingScheme::HardCount);

    auto cap = detail::capture_windows(engine, sched, train_to,
                                       opt.check_localized);

    // fault-free oracle states along the trajectory
    Engine oracle(cfg);
    std::map<uint64_t, std::vector<uint8_t>> oracle_bytes;
    oracle_bytes[0] = oracle.serialize_state();
    while (oracle.state().iteration < train_to) {
      oracle.run_iteration();
      oracle_bytes[oracle.state().iteration] = oracle.serialize_state();
    }

    for (int32_t wp = 0; wp < opt.window_positions; ++wp) {
      const uint64_t a = static_cast<uint64_t>(wp) * w;

      if (opt.check_conversion) {
        VerifyCell cell;
        cell.seed = cfg.seed;
        cell.window_start = a;
        cell.check = "conversion";
        try {
          SparseCheckpoint ckpt = cap.windows.at(a);
          if (opt.corrupt_snapshot && wp == 0)
            ckpt.blobs[0][ckpt.blobs[0].size() / 2] ^= 0x20;
          Engine scratch(cfg);
          const TrainState converted = sparse_to_dense_convert(scratch, ckpt);
          cell.pass = Engine::serialize_state(converted) ==
                      oracle_bytes.at(converted.iteration);
          if (!cell.pass) cell.detail = "state bytes differ from oracle";
        } catch (const std::exception& e) {
          cell.pass = false;
          cell.detail = e.what();
        }
        report.cells.push_back(cell);
      }

      if (opt.check_localized && cfg.parallel.pp_stages > 1) {
        // failure one iteration past the window, each stage in turn
        const uint64_t fail_at = std::min<uint64_t>(a + w + 1, train_to);
        for (int32_t stage = 0; stage < cfg.parallel.pp_stages; ++stage) {
          VerifyCell cell;
          cell.seed = cfg.seed;
          cell.window_start = a;
          cell.check = "localized-stage" + std::to_string(stage);
          try {
            const auto scope = recovery_scope({{0, stage}}, cfg.parallel);
            Engine scratch(cfg);
            const auto rec = localized_recover(scratch, scope.segments[0],
                                               cap.windows.at(a), cap.log,
                                               fail_at);
            Engine ref(cfg);
            while (ref.state().iteration < fail_at) ref.run_iteration();
            bool ok = true;
            for (const auto& [id, op] : rec.ops) {
              const auto& expect = ref.state().ops[id];
              if (op.master != expect.master || op.m != expect.m ||
                  op.v != expect.v || op.step != expect.step)
                ok = false;
            }
            cell.pass = ok;
            if (!ok) cell.detail = "recovered stage state differs from oracle";
          } catch (const std::exception& e) {
            cell.pass = false;
            cell.detail = e.what();
          }
          report.cells.push_back(cell);
        }
      }
    }

    // Partial-expert round-robin baseline: restoring from its newest records
    // reverts experts to stale state; the matrix reports the token loss.
    if (opt.include_moc && si == 0) {
      Engine moc_engine(cfg);
      const int32_t E = cfg.model.experts_per_layer;
      const int32_t K = std::max(1, E / 4);
      std::map<uint32_t, uint64_t> last_snap;  // op id -> iteration
      for (const auto& op : moc_engine.operators()) last_snap[op.id] = 0;
      std::vector<std::map<uint32_t, double>> counts_per_iter;

      int32_t cursor = 0;
      const uint64_t fail_at = 2 * w + 1;
      std::vector<double> prev_counts(moc_engine.operators().size(), 0.0);
      while (moc_engine.state().iteration < fail_at) {
        moc_engine.run_iteration();
        const uint64_t it = moc_engine.state().iteration;
        std::map<uint32_t, double> delta;
        const auto descs = moc_engine.descriptors_with_popularity();
        for (const auto& op : descs) {
          delta[op.id] = op.popularity.hard_count - prev_counts[op.id];
          prev_counts[op.id] = op.popularity.hard_count;
        }
        counts_per_iter.push_back(delta);
        // snapshot K experts per layer plus every non-expert/gate
        for (const auto& op : descs) {
          if (!op.is_expert()) {
            last_snap[op.id] = it;
            continue;
          }
          const int32_t lo = cursor, hi = cursor + K;
          const int32_t e = op.expert_index;
          if ((e >= lo && e < hi) || (hi > E && e < hi - E)) last_snap[op.id] = it;
        }
        cursor = (cursor + K) % E;
      }
      double lost = 0;
      int32_t stale = 0;
      for (const auto& op : moc_engine.operators()) {
        if (!op.is_expert()) continue;
        const uint64_t snap = last_snap[op.id];
        if (snap < fail_at) {
          stale += 1;
          for (uint64_t it = snap + 1; it <= fail_at; ++it)
            lost += counts_per_iter[it - 1][op.id];
        }
      }
      report.moc_tokens_lost = lost;
      report.moc_stale_mismatches = stale;
    }
  }
  return report;
}

}  // namespace moelab
