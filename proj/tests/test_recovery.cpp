// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <map>

#include "moelab/recovery.hpp"
#include "moelab/schedule.hpp"
#include "moelab/snapshot.hpp"

using namespace moelab;

namespace {

EngineConfig toy_config(int layers, int stages, uint64_t seed) {
  EngineConfig cfg;
  cfg.model.layers = layers;
  cfg.model.experts_per_layer = 4;
  cfg.model.top_k = 2;
  cfg.model.token_dim = 4;
  cfg.model.expert_hidden = 4;
  cfg.model.nonexpert_hidden = 4;
  cfg.parallel.pp_stages = stages;
  cfg.parallel.dp_degree = 1;
  cfg.parallel.microbatches = 2;
  cfg.parallel.microbatch_size = 4;
  cfg.parallel.global_batch = 8;
  cfg.seed = seed;
  return cfg;
}

// Runs training while collecting per-window sparse checkpoints and boundary
// logs, mirroring the snapshot-every-iteration protocol: the record for
// state s carries slot (s mod W) of the schedule.
struct TrainRun {
  Engine engine;
  SparseSchedule schedule;
  UpstreamLog log;
  std::map<uint64_t, SparseCheckpoint> windows;  // by window start

  TrainRun(const EngineConfig& cfg, int64_t wsparse, int64_t o_active)
      : engine(cfg),
        schedule(generate_schedule(
            order_operators(engine.operators(), OrderingScheme::HardCount),
            wsparse, o_active, OrderingScheme::HardCount)) {
    record_state();  // state 0
  }

  void record_state() {
    const uint64_t s = engine.state().iteration;
    const uint64_t w = s / schedule.wsparse * schedule.wsparse;
    const uint32_t slot = static_cast<uint32_t>(s % schedule.wsparse);
    auto& ckpt = windows[w];
    if (ckpt.blobs.empty()) {
      ckpt.window_start = w;
      ckpt.wsparse = static_cast<uint32_t>(schedule.wsparse);
    }
    ckpt.add_record(take_sparse_snapshot(engine, schedule.slots[slot], slot),
                    engine.config().precision);
  }

  void run_to(uint64_t iteration, bool with_log = false) {
    while (engine.state().iteration < iteration) {
      engine.run_iteration(nullptr, with_log ? &log : nullptr);
      record_state();
    }
  }
};

std::vector<uint8_t> oracle_state_bytes(const EngineConfig& cfg, uint64_t iteration) {
  Engine oracle(cfg);
  while (oracle.state().iteration < iteration) oracle.run_iteration();
  return oracle.serialize_state();
}

}  // namespace

TEST_CASE("sparse-to-dense conversion matches the dense oracle bit-exactly") {
  const EngineConfig cfg = toy_config(1, 1, 31);
  TrainRun run(cfg, 3, 2);
  run.run_to(9);

  for (uint64_t window : {0ull, 3ull, 6ull}) {
    Engine scratch(cfg);
    const TrainState converted =
        sparse_to_dense_convert(scratch, run.windows.at(window));
    REQUIRE(converted.iteration == window + 3);
    REQUIRE(Engine::serialize_state(converted) ==
            oracle_state_bytes(cfg, window + 3));
  }
}

TEST_CASE("conversion handles multi-layer pipelines and many seeds") {
  for (uint64_t seed : {1ull, 2ull, 3ull}) {
    const EngineConfig cfg = toy_config(3, 3, seed);
    TrainRun run(cfg, 3, 6);
    run.run_to(6);
    Engine scratch(cfg);
    const TrainState converted =
        sparse_to_dense_convert(scratch, run.windows.at(3));
    REQUIRE(Engine::serialize_state(converted) == oracle_state_bytes(cfg, 6));
  }
}

TEST_CASE("degenerate single-slot window returns the record directly") {
  const EngineConfig cfg = toy_config(1, 1, 5);
  TrainRun run(cfg, 1, 6);
  run.run_to(4);
  Engine scratch(cfg);
  const TrainState converted = sparse_to_dense_convert(scratch, run.windows.at(4));
  REQUIRE(converted.iteration == 4);
  REQUIRE(Engine::serialize_state(converted) == oracle_state_bytes(cfg, 4));
}

TEST_CASE("conversion plan activates every operator exactly once") {
  const EngineConfig cfg = toy_config(1, 1, 8);
  TrainRun run(cfg, 3, 2);
  run.run_to(3);
  const ConversionPlan plan = conversion_plan(run.windows.at(0), cfg.precision);
  REQUIRE(plan.steps.size() == 3);
  std::map<uint32_t, int> seen;
  for (size_t k = 0; k < plan.steps.size(); ++k) {
    REQUIRE(plan.steps[k].replay_iteration == k + 1);
    for (uint32_t id : plan.steps[k].activating) seen[id] += 1;
  }
  REQUIRE(seen.size() == 6);
  for (const auto& [id, n] : seen) REQUIRE(n == 1);
}

TEST_CASE("corrupt record fails conversion naming the slot") {
  const EngineConfig cfg = toy_config(1, 1, 12);
  TrainRun run(cfg, 3, 2);
  run.run_to(3);
  SparseCheckpoint bad = run.windows.at(0);
  bad.blobs[1][bad.blobs[1].size() / 3] ^= 0x10;
  Engine scratch(cfg);
  REQUIRE_THROWS_WITH(sparse_to_dense_convert(scratch, bad),
                      Catch::Matchers::ContainsSubstring("slot 1") &&
                          Catch::Matchers::ContainsSubstring("checksum"));
}

TEST_CASE("recovery scope groups contiguous failures per pipeline") {
  ParallelPlan plan;
  plan.pp_stages = 3;
  plan.dp_degree = 2;

  SECTION("single interior failure reads both neighbours") {
    const auto scope = recovery_scope({{0, 1}}, plan);
    REQUIRE(scope.segments.size() == 1);
    const auto& s = scope.segments[0];
    REQUIRE(s.stage_lo == 1);
    REQUIRE(s.stage_hi == 1);
    REQUIRE(s.upstream_log_owner == 0);
    REQUIRE(s.downstream_log_owner == 2);
  }

  SECTION("adjacent failures form one joint segment") {
    const auto scope = recovery_scope({{0, 1}, {0, 2}}, plan);
    REQUIRE(scope.segments.size() == 1);
    REQUIRE(scope.segments[0].stage_lo == 1);
    REQUIRE(scope.segments[0].stage_hi == 2);
    REQUIRE(scope.segments[0].upstream_log_owner == 0);
    REQUIRE_FALSE(scope.segments[0].downstream_log_owner.has_value());
  }

  SECTION("nonadjacent failures recover independently") {
    const auto scope = recovery_scope({{0, 0}, {0, 2}}, plan);
    REQUIRE(scope.segments.size() == 2);
    REQUIRE_FALSE(scope.segments[0].upstream_log_owner.has_value());
    REQUIRE(scope.segments[0].downstream_log_owner == 1);
    REQUIRE(scope.segments[1].upstream_log_owner == 1);
  }

  SECTION("cascading failure merges into an ongoing recovery") {
    const auto ongoing = recovery_scope({{0, 1}}, plan);
    const auto merged = recovery_scope({{0, 2}}, plan, &ongoing);
    REQUIRE(merged.segments.size() == 1);
    REQUIRE(merged.segments[0].stage_lo == 1);
    REQUIRE(merged.segments[0].stage_hi == 2);

    const auto disjoint = recovery_scope({{1, 0}}, plan, &ongoing);
    REQUIRE(disjoint.segments.size() == 2);
  }

  SECTION("unknown worker is rejected") {
    REQUIRE_THROWS_WITH(recovery_scope({{0, 7}}, plan),
                        Catch::Matchers::ContainsSubstring("unknown worker"));
  }
}

TEST_CASE("localized recovery rebuilds each stage bit-exactly") {
  const EngineConfig cfg = toy_config(3, 3, 77);
  const uint64_t fail_at = 7;  // inside window [6, 9)

  for (int32_t failed_stage = 0; failed_stage < 3; ++failed_stage) {
    TrainRun run(cfg, 3, 6);
    run.run_to(fail_at, /*with_log=*/true);

    Engine oracle(cfg);
    while (oracle.state().iteration < fail_at) oracle.run_iteration();

    const auto scope = recovery_scope({{0, failed_stage}}, cfg.parallel);
    REQUIRE(scope.segments.size() == 1);

    std::map<int32_t, Sha256> before;
    for (int32_t s = 0; s < 3; ++s)
      if (s != failed_stage) before[s] = run.engine.stage_digest(s);

    Engine scratch(cfg);
    const auto result = localized_recover(scratch, scope.segments[0],
                                          run.windows.at(3), run.log, fail_at);
    REQUIRE(result.iteration == fail_at);

    for (const auto& [id, op] : result.ops) {
      const auto& ref = oracle.state().ops[id];
      REQUIRE(op.master == ref.master);
      REQUIRE(op.m == ref.m);
      REQUIRE(op.v == ref.v);
      REQUIRE(op.step == ref.step);
    }
    for (const auto& meta : run.engine.operators()) {
      const bool in_scope = run.engine.stage_of_op(meta.id) == failed_stage;
      REQUIRE(result.ops.count(meta.id) == static_cast<size_t>(in_scope));
    }
    for (const auto& [s, digest] : before)
      REQUIRE(run.engine.stage_digest(s) == digest);
  }
}

TEST_CASE("scope spanning all stages degenerates to global conversion") {
  const EngineConfig cfg = toy_config(3, 3, 19);
  TrainRun run(cfg, 3, 6);
  run.run_to(6, /*with_log=*/true);

  RecoverySegment seg;
  seg.pipeline = 0;
  seg.stage_lo = 0;
  seg.stage_hi = 2;
  Engine scratch(cfg);
  const auto result =
      localized_recover(scratch, seg, run.windows.at(3), run.log, 6);

  Engine scratch2(cfg);
  const TrainState converted =
      sparse_to_dense_convert(scratch2, run.windows.at(3));
  for (const auto& [id, op] : result.ops) {
    REQUIRE(op.master == converted.ops[id].master);
    REQUIRE(op.m == converted.ops[id].m);
    REQUIRE(op.v == converted.ops[id].v);
  }
  REQUIRE(result.ops.size() == run.engine.operators().size());
}

TEST_CASE("recovery after log GC over the retained window still succeeds") {
  const EngineConfig cfg = toy_config(3, 3, 23);
  TrainRun run(cfg, 3, 6);
  run.run_to(8, /*with_log=*/true);

  // window [3,6) persisted; everything older is collectable
  gc_logs(run.log, 3);
  for (const auto& [k, v] : run.log.entries) REQUIRE(k.iteration >= 3);

  Engine oracle(cfg);
  while (oracle.state().iteration < 8) oracle.run_iteration();

  const auto scope = recovery_scope({{0, 1}}, cfg.parallel);
  Engine scratch(cfg);
  const auto result = localized_recover(scratch, scope.segments[0],
                                        run.windows.at(3), run.log, 8);
  for (const auto& [id, op] : result.ops)
    REQUIRE(op.master == oracle.state().ops[id].master);
}

TEST_CASE("missing log entries are reported with their coordinates") {
  const EngineConfig cfg = toy_config(3, 3, 29);
  TrainRun run(cfg, 3, 6);
  run.run_to(6, /*with_log=*/true);
  gc_logs(run.log, 100);  // drop everything

  const auto scope = recovery_scope({{0, 1}}, cfg.parallel);
  Engine scratch(cfg);
  REQUIRE_THROWS_WITH(localized_recover(scratch, scope.segments[0],
                                        run.windows.at(3), run.log, 6),
                      Catch::Matchers::ContainsSubstring("missing entry"));
}

TEST_CASE("recovery time bounds follow the closed forms") {
  const auto sparse = recovery_time_bounds_sparse(6, 3.0);
  REQUIRE(sparse.min_seconds == 0.0);
  REQUIRE(sparse.max_seconds == Catch::Approx(36.0));
  REQUIRE(sparse.expected_seconds == Catch::Approx(27.0));

  const auto dense = recovery_time_bounds_dense(31, 3.45);
  REQUIRE(dense.expected_seconds == Catch::Approx(0.5 * 31 * 3.45));
  REQUIRE(dense.max_seconds == Catch::Approx(31 * 3.45));

  const auto none = recovery_time_bounds_sparse(0, 3.0);
  REQUIRE(none.max_seconds == 0.0);
  REQUIRE(none.expected_seconds == 0.0);
}

TEST_CASE("upstream log budget bounds two windows of boundary tensors") {
  ModelSpec model;
  model.layers = 3;
  model.token_dim = 4;
  ParallelPlan plan;
  plan.pp_stages = 3;
  plan.dp_degree = 2;
  plan.microbatches = 2;
  plan.microbatch_size = 4;
  // 2 windows x 3 iters x (2 boundaries x 2 dirs x 4 micro-batches) x 64 B
  REQUIRE(upstream_log_bytes(model, plan, 3) == 2 * 3 * (2 * 2 * 2 * 2) * 4 * 4 * 4);

  ClusterSpec cluster;
  cluster.nodes = 1;
  cluster.cpu_mem_per_node = 128;  // far too small
  REQUIRE_THROWS_WITH(check_log_budget(model, plan, 3, cluster),
                      Catch::Matchers::ContainsSubstring("log budget"));
  cluster.cpu_mem_per_node = 1e9;
  REQUIRE_NOTHROW(check_log_budget(model, plan, 3, cluster));
}
