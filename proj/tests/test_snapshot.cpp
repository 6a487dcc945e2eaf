// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include "moelab/schedule.hpp"
#include "moelab/snapshot.hpp"

using namespace moelab;

namespace {

// Six operators: E0..E3, NE, G in one layer (same shape as the worked
// sparse-checkpointing example: window of 3 with 2 full snapshots per slot).
EngineConfig six_op_config(uint64_t seed = 2) {
  EngineConfig cfg;
  cfg.model.layers = 1;
  cfg.model.experts_per_layer = 4;
  cfg.model.top_k = 2;
  cfg.model.token_dim = 4;
  cfg.model.expert_hidden = 4;
  cfg.model.nonexpert_hidden = 4;
  cfg.parallel.pp_stages = 1;
  cfg.parallel.dp_degree = 1;
  cfg.parallel.microbatches = 2;
  cfg.parallel.microbatch_size = 4;
  cfg.parallel.global_batch = 8;
  cfg.seed = seed;
  return cfg;
}

SparseSchedule six_op_schedule(const Engine& e) {
  // zero popularity: experts keep id order, NE and G go last
  return generate_schedule(order_operators(e.operators(), OrderingScheme::HardCount),
                           3, 2, OrderingScheme::HardCount);
}

}  // namespace

TEST_CASE("window slots: full sets rotate, compute-only covers later slots") {
  Engine e(six_op_config());
  const auto sched = six_op_schedule(e);
  REQUIRE(sched.slots.size() == 3);
  REQUIRE(sched.slots[0].active == std::vector<uint32_t>{0, 1});
  REQUIRE(sched.slots[0].compute_only == std::vector<uint32_t>{2, 3, 4, 5});
  REQUIRE(sched.slots[1].active == std::vector<uint32_t>{2, 3});
  REQUIRE(sched.slots[1].compute_only == std::vector<uint32_t>{4, 5});
  REQUIRE(sched.slots[2].active == std::vector<uint32_t>{4, 5});
  REQUIRE(sched.slots[2].compute_only.empty());

  e.run_iteration();
  const SnapshotRecord rec0 = take_sparse_snapshot(e, sched.slots[0], 0);
  REQUIRE(rec0.iteration == 1);
  int full = 0, compute_only = 0;
  for (const auto& [id, p] : rec0.entries)
    (p.mode == SnapshotMode::Full ? full : compute_only) += 1;
  REQUIRE(full == 2);
  REQUIRE(compute_only == 4);

  const SnapshotRecord rec2 = take_sparse_snapshot(e, sched.slots[2], 2);
  for (const auto& [id, p] : rec2.entries) REQUIRE(p.mode == SnapshotMode::Full);
  REQUIRE(rec2.entries.size() == 2);
}

TEST_CASE("single-slot window record equals a dense checkpoint") {
  Engine e(six_op_config());
  e.run_iteration();
  ScheduleSlot all;
  for (const auto& op : e.operators()) all.active.push_back(op.id);
  const SnapshotRecord rec = take_sparse_snapshot(e, all, 0);
  const DenseCheckpoint dense = take_dense_checkpoint(e);
  PrecisionPlan plan = e.config().precision;
  REQUIRE(rec.modeled_bytes(plan) == dense.payload_bytes(plan));
  REQUIRE(rec.entries.size() == dense.record.entries.size());
}

TEST_CASE("snapshot cost model is bytes over PCIe bandwidth") {
  ClusterSpec cluster;
  cluster.pcie_bandwidth = 16.0 * 1024 * 1024;  // 16 MB/s
  PrecisionPlan plan;
  SnapshotRecord rec;
  SnapshotPayload p;
  p.mode = SnapshotMode::ComputeOnly;
  p.compute.assign(32 * 1024 * 1024 / plan.compute_bytes, 0.0f);  // 32 MB payload
  rec.entries.emplace_back(0, std::move(p));
  REQUIRE(snapshot_cost_model(rec, plan, cluster) == Catch::Approx(2.0));

  SnapshotRecord empty;
  REQUIRE(snapshot_cost_model(empty, plan, cluster) == 0.0);
}

TEST_CASE("equal operators: slot record is 32P bytes against a 72P dense") {
  EngineConfig cfg = six_op_config();
  const int64_t p = 1000;
  cfg.model.expert_params = p;
  cfg.model.nonexpert_params = p;
  cfg.model.gate_params = p;
  PrecisionPlan plan;
  // slot 0: 2 full + 4 compute-only
  const int64_t slot0 =
      2 * p * plan.full_state_bytes() + 4 * p * plan.compute_bytes;
  const auto dense = dense_checkpoint_size(cfg.model, plan);
  REQUIRE(slot0 == 32 * p);
  REQUIRE(dense.payload_bytes == 72 * p);
  REQUIRE(static_cast<double>(slot0) / dense.payload_bytes ==
          Catch::Approx(32.0 / 72.0));
}

TEST_CASE("record serialization round-trips bit-exactly") {
  Engine e(six_op_config(9));
  e.run_iteration();
  const auto sched = six_op_schedule(e);
  const SnapshotRecord rec = take_sparse_snapshot(e, sched.slots[0], 0);
  PrecisionPlan plan = e.config().precision;
  const auto blob = serialize_record(rec, plan, 1, 1, 3);
  const ParsedRecord pr = parse_record(blob, plan);
  REQUIRE(pr.record.iteration == rec.iteration);
  REQUIRE(pr.record.slot == rec.slot);
  REQUIRE(pr.record.entries.size() == rec.entries.size());
  for (size_t i = 0; i < rec.entries.size(); ++i) {
    const auto& [ida, a] = rec.entries[i];
    const auto& [idb, b] = pr.record.entries[i];
    REQUIRE(ida == idb);
    REQUIRE(a.mode == b.mode);
    REQUIRE(a.master == b.master);
    REQUIRE(a.m == b.m);
    REQUIRE(a.v == b.v);
    REQUIRE(a.step == b.step);
    REQUIRE(a.compute == b.compute);  // half codec is lossless on grid values
  }
  // serialized again, identical bytes
  REQUIRE(serialize_record(pr.record, plan, 1, 1, 3) == blob);
}

TEST_CASE("corrupted container fails its checksum") {
  Engine e(six_op_config(9));
  e.run_iteration();
  const auto sched = six_op_schedule(e);
  const SnapshotRecord rec = take_sparse_snapshot(e, sched.slots[1], 1);
  PrecisionPlan plan = e.config().precision;
  auto blob = serialize_record(rec, plan, 1, 1, 3);
  blob[blob.size() / 2] ^= 0x40;
  REQUIRE_THROWS_WITH(parse_record(blob, plan),
                      Catch::Matchers::ContainsSubstring("checksum"));
}

TEST_CASE("dense checkpoint load round-trips the training state") {
  Engine e(six_op_config(4));
  for (int i = 0; i < 2; ++i) e.run_iteration();
  const DenseCheckpoint ck = take_dense_checkpoint(e);
  const TrainState restored =
      ck.to_state(static_cast<int>(e.config().precision.compute_bytes));
  REQUIRE(Engine::serialize_state(restored) == e.serialize_state());
}

TEST_CASE("dense checkpoint refuses frozen operators") {
  Engine e(six_op_config(4));
  e.run_iteration();
  e.mutable_state().ops[3].has_full_state = false;
  REQUIRE_THROWS_WITH(take_dense_checkpoint(e),
                      Catch::Matchers::ContainsSubstring("frozen"));
}

TEST_CASE("dense checkpoint size matches the model arithmetic") {
  Engine e(six_op_config(4));
  e.run_iteration();
  const DenseCheckpoint ck = take_dense_checkpoint(e);
  const auto expect = dense_checkpoint_size(e.config().model, e.config().precision);
  REQUIRE(ck.payload_bytes(e.config().precision) == expect.payload_bytes);
}

TEST_CASE("sparse checkpoint window coverage and persistence") {
  Engine e(six_op_config(6));
  const auto sched = six_op_schedule(e);
  PrecisionPlan plan = e.config().precision;

  SparseCheckpoint ckpt;
  ckpt.window_start = 1;
  ckpt.wsparse = 3;
  ckpt.replication_target = 2;
  for (int k = 0; k < 3; ++k) {
    e.run_iteration();
    ckpt.add_record(take_sparse_snapshot(e, sched.slots[k], k), plan);
  }
  REQUIRE(ckpt.complete());
  REQUIRE_NOTHROW(ckpt.check_coverage(e.operators().size(), plan));
  REQUIRE_FALSE(ckpt.persisted());
  ckpt.replication = {2, 2, 1};
  REQUIRE_FALSE(ckpt.persisted());
  ckpt.replication = {2, 2, 2};
  REQUIRE(ckpt.persisted());

  // duplicate full payload breaks coverage
  SparseCheckpoint bad = ckpt;
  bad.blobs[2] = bad.blobs[1];
  REQUIRE_THROWS_WITH(bad.check_coverage(e.operators().size(), plan),
                      Catch::Matchers::ContainsSubstring("coverage"));
}

TEST_CASE("snapshot slot referencing an unknown operator is an error") {
  Engine e(six_op_config());
  ScheduleSlot slot;
  slot.active = {42};
  REQUIRE_THROWS_WITH(take_sparse_snapshot(e, slot, 0),
                      Catch::Matchers::ContainsSubstring("unknown operator"));
}
