// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "moelab/core.hpp"
#include "moelab/digest.hpp"
#include "moelab/engine.hpp"
#include "moelab/tensor.hpp"

namespace moelab {

// One operator's payload inside a snapshot record.
struct SnapshotPayload {
  SnapshotMode mode = SnapshotMode::Full;
  // Full
  std::vector<float> master;
  std::vector<float> m;
  std::vector<float> v;
  uint64_t step = 0;
  // ComputeOnly
  std::vector<float> compute;

  int64_t param_count() const {
    return static_cast<int64_t>(mode == SnapshotMode::Full ? master.size()
                                                           : compute.size());
  }
};

// Per-iteration snapshot: full state for this slot's active set, compute
// weights for every operator in a later slot of the window.
struct SnapshotRecord {
  uint64_t iteration = 0;
  uint32_t slot = 0;
  uint64_t data_seed = 0;
  std::vector<std::pair<uint32_t, SnapshotPayload>> entries;  // sorted by id

  int64_t modeled_bytes(const PrecisionPlan& plan) const {
    int64_t b = 0;
    for (const auto& [id, p] : entries)
      b += p.mode == SnapshotMode::Full
               ? p.param_count() * plan.full_state_bytes()
               : p.param_count() * plan.compute_bytes;
    return b;
  }
};

// Modeled GPU-to-CPU transfer time for one record.
inline double snapshot_cost_model(const SnapshotRecord& rec,
                                  const PrecisionPlan& plan,
                                  const ClusterSpec& cluster) {
  if (cluster.pcie_bandwidth <= 0)
    throw std::invalid_argument("snapshot cost: pcie_bandwidth must be > 0");
  return static_cast<double>(rec.modeled_bytes(plan)) / cluster.pcie_bandwidth;
}

// === binary container ====================================================
//
// Versioned layout, checksummed:
//   u32 magic 'MLCK'  u32 version  u8 kind(0 dense / 1 sparse record)
//   u64 iteration  u64 window_start  u32 wsparse  u32 slot  u64 data_seed
//   u32 op_count
//   per op: u32 id  u8 mode  u64 param_count  payload
//     Full:        u64 step, master f32[P], m f32[P], v f32[P]
//     ComputeOnly: compute values encoded at plan.compute_bytes width
//   u64 fnv1a-64 checksum over everything above

inline constexpr uint32_t kContainerMagic = 0x4b434c4du;  // "MLCK"
inline constexpr uint32_t kContainerVersion = 1;

namespace detail {

inline void write_compute(ByteWriter& w, const std::vector<float>& vals,
                          int compute_bytes) {
  switch (compute_bytes) {
    case 4:
      w.floats(vals);
      break;
    case 2:
      for (float v : vals) w.value<uint16_t>(pack_reduced(v, 5, 10));
      break;
    case 1:
      for (float v : vals)
        w.value<uint8_t>(static_cast<uint8_t>(pack_reduced(v, 4, 3)));
      break;
    default:
      throw std::invalid_argument("container: unsupported compute width");
  }
}

inline void read_compute(ByteReader& r, std::vector<float>& vals, size_t count,
                         int compute_bytes) {
  vals.resize(count);
  switch (compute_bytes) {
    case 4:
      r.floats(vals, count);
      break;
    case 2:
      for (auto& v : vals) v = unpack_reduced(r.value<uint16_t>(), 5, 10);
      break;
    case 1:
      for (auto& v : vals) v = unpack_reduced(r.value<uint8_t>(), 4, 3);
      break;
    default:
      throw std::invalid_argument("container: unsupported compute width");
  }
}

}  // namespace detail

inline std::vector<uint8_t> serialize_record(const SnapshotRecord& rec,
                                             const PrecisionPlan& plan,
                                             uint8_t kind, uint64_t window_start,
                                             uint32_t wsparse) {
  ByteWriter w;
  w.value<uint32_t>(kContainerMagic);
  w.value<uint32_t>(kContainerVersion);
  w.value<uint8_t>(kind);
  w.value<uint64_t>(rec.iteration);
  w.value<uint64_t>(window_start);
  w.value<uint32_t>(wsparse);
  w.value<uint32_t>(rec.slot);
  w.value<uint64_t>(rec.data_seed);
  w.value<uint32_t>(static_cast<uint32_t>(rec.entries.size()));
  for (const auto& [id, p] : rec.entries) {
    w.value<uint32_t>(id);
    w.value<uint8_t>(static_cast<uint8_t>(p.mode));
    w.value<uint64_t>(static_cast<uint64_t>(p.param_count()));
    if (p.mode == SnapshotMode::Full) {
      w.value<uint64_t>(p.step);
      w.floats(p.master);
      w.floats(p.m);
      w.floats(p.v);
    } else {
      detail::write_compute(w, p.compute, static_cast<int>(plan.compute_bytes));
    }
  }
  w.value<uint64_t>(fnv1a64(w.buf));
  return std::move(w.buf);
}

struct ParsedRecord {
  SnapshotRecord record;
  uint64_t window_start = 0;
  uint32_t wsparse = 0;
  uint8_t kind = 0;
};

inline ParsedRecord parse_record(std::span<const uint8_t> blob,
                                 const PrecisionPlan& plan) {
  if (blob.size() < 8) throw std::runtime_error("container truncated");
  const uint64_t stored = fnv1a64(blob.subspan(blob.size() - 8));
  // checksum covers all bytes before the trailer
  uint64_t computed = fnv1a64(blob.first(blob.size() - 8));
  {
    ByteReader tr{blob.subspan(blob.size() - 8)};
    uint64_t trailer = tr.value<uint64_t>();
    if (trailer != computed) throw std::runtime_error("container checksum mismatch");
  }
  (void)stored;

  ByteReader r{blob.first(blob.size() - 8)};
  ParsedRecord out;
  if (r.value<uint32_t>() != kContainerMagic)
    throw std::runtime_error("container: bad magic");
  const uint32_t version = r.value<uint32_t>();
  if (version != kContainerVersion)
    throw std::runtime_error("container: unsupported version " +
                             std::to_string(version));
  out.kind = r.value<uint8_t>();
  out.record.iteration = r.value<uint64_t>();
  out.window_start = r.value<uint64_t>();
  out.wsparse = r.value<uint32_t>();
  out.record.slot = r.value<uint32_t>();
  out.record.data_seed = r.value<uint64_t>();
  const uint32_t n = r.value<uint32_t>();
  out.record.entries.resize(n);
  for (uint32_t i = 0; i < n; ++i) {
    auto& [id, p] = out.record.entries[i];
    id = r.value<uint32_t>();
    p.mode = static_cast<SnapshotMode>(r.value<uint8_t>());
    const uint64_t pc = r.value<uint64_t>();
    if (p.mode == SnapshotMode::Full) {
      p.step = r.value<uint64_t>();
      r.floats(p.master, pc);
      r.floats(p.m, pc);
      r.floats(p.v, pc);
    } else {
      detail::read_compute(r, p.compute, pc, static_cast<int>(plan.compute_bytes));
    }
  }
  return out;
}

// === snapshot capture ====================================================

// Snapshot the slot's active set in full plus compute weights for operators
// in later slots of the window. Active-set operators must currently hold
// full state.
inline SnapshotRecord take_sparse_snapshot(const Engine& engine,
                                           const ScheduleSlot& slot,
                                           uint32_t slot_index) {
  const auto& st = engine.state();
  SnapshotRecord rec;
  rec.iteration = st.iteration;
  rec.slot = slot_index;
  rec.data_seed = st.data_seed;
  auto check_id = [&](uint32_t id) {
    if (id >= st.ops.size())
      throw std::invalid_argument("snapshot slot references unknown operator " +
                                  std::to_string(id));
  };
  for (uint32_t id : slot.active) {
    check_id(id);
    const auto& op = st.ops[id];
    if (!op.has_full_state)
      throw std::runtime_error("snapshot: operator " + std::to_string(id) +
                               " in active set has no full state");
    SnapshotPayload p;
    p.mode = SnapshotMode::Full;
    p.master = op.master;
    p.m = op.m;
    p.v = op.v;
    p.step = op.step;
    rec.entries.emplace_back(id, std::move(p));
  }
  for (uint32_t id : slot.compute_only) {
    check_id(id);
    SnapshotPayload p;
    p.mode = SnapshotMode::ComputeOnly;
    p.compute = st.ops[id].compute;
    rec.entries.emplace_back(id, std::move(p));
  }
  std::sort(rec.entries.begin(), rec.entries.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  return rec;
}

// Dense checkpoint: full payload for every operator plus metadata. The
// equivalence oracle for sparse-to-dense conversion.
struct DenseCheckpoint {
  SnapshotRecord record;  // every operator, Full

  int64_t payload_bytes(const PrecisionPlan& plan) const {
    return record.modeled_bytes(plan);
  }
  std::vector<uint8_t> serialize(const PrecisionPlan& plan) const {
    return serialize_record(record, plan, /*kind=*/0, record.iteration, 1);
  }

  TrainState to_state(int compute_bytes) const {
    TrainState st;
    st.iteration = record.iteration;
    st.data_seed = record.data_seed;
    uint32_t max_id = 0;
    for (const auto& [id, p] : record.entries) max_id = std::max(max_id, id);
    st.ops.resize(max_id + 1);
    for (const auto& [id, p] : record.entries) {
      auto& op = st.ops[id];
      op.master = p.master;
      op.m = p.m;
      op.v = p.v;
      op.step = p.step;
      op.has_full_state = true;
      op.refresh_compute(compute_bytes);
    }
    return st;
  }
};

inline DenseCheckpoint take_dense_checkpoint(const Engine& engine) {
  const auto& st = engine.state();
  DenseCheckpoint ck;
  ck.record.iteration = st.iteration;
  ck.record.slot = 0;
  ck.record.data_seed = st.data_seed;
  for (uint32_t id = 0; id < st.ops.size(); ++id) {
    const auto& op = st.ops[id];
    if (!op.has_full_state)
      throw std::runtime_error("dense checkpoint: operator " + std::to_string(id) +
                               " is frozen");
    SnapshotPayload p;
    p.mode = SnapshotMode::Full;
    p.master = op.master;
    p.m = op.m;
    p.v = op.v;
    p.step = op.step;
    ck.record.entries.emplace_back(id, std::move(p));
  }
  return ck;
}

// W_sparse window of serialized records plus replication bookkeeping. The
// checkpoint counts as persisted only once every record sits on at least
// `replication_target` peers.
struct SparseCheckpoint {
  uint64_t window_start = 0;
  uint32_t wsparse = 0;
  int32_t replication_target = 2;
  std::vector<std::vector<uint8_t>> blobs;   // one per record, slot order
  std::vector<int32_t> replication;          // peer copies per record

  void add_record(const SnapshotRecord& rec, const PrecisionPlan& plan) {
    blobs.push_back(serialize_record(rec, plan, /*kind=*/1, window_start, wsparse));
    replication.push_back(0);
  }

  bool complete() const { return blobs.size() == wsparse; }

  bool persisted() const {
    if (!complete()) return false;
    for (int32_t r : replication)
      if (r < replication_target) return false;
    return true;
  }

  // Every operator must receive exactly one Full payload across the window.
  void check_coverage(size_t op_count, const PrecisionPlan& plan) const {
    std::vector<int> seen(op_count, 0);
    for (const auto& blob : blobs) {
      const ParsedRecord pr = parse_record(blob, plan);
      for (const auto& [id, p] : pr.record.entries)
        if (p.mode == SnapshotMode::Full) seen.at(id) += 1;
    }
    for (size_t id = 0; id < op_count; ++id)
      if (seen[id] != 1)
        throw std::runtime_error("window coverage violated for operator " +
                                 std::to_string(id) + ": " +
                                 std::to_string(seen[id]) + " full payloads");
  }
};

}  // namespace moelab
