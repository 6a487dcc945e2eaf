// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace moelab {

// Bytes per parameter for each state class. Full state per parameter is
// master_bytes + optimizer_bytes; compute weights are derivable from masters
// and are what frozen operators carry.
struct PrecisionPlan {
  int64_t compute_bytes = 2;
  int64_t master_bytes = 4;
  int64_t optimizer_bytes = 8;  // sum over all optimizer-state tensors

  int64_t full_state_bytes() const { return master_bytes + optimizer_bytes; }

  void check() const {
    if (compute_bytes < 1 || master_bytes < 1 || optimizer_bytes < 1)
      throw std::invalid_argument("precision plan: all byte widths must be >= 1");
  }
};

enum class OperatorClass : uint8_t { Expert = 0, NonExpert = 1, Gate = 2 };

// Activation statistics per operator. Counters only move forward between
// explicit decays.
struct Popularity {
  double hard_count = 0.0;   // tokens routed to this operator
  double soft_count = 0.0;   // summed gating probabilities
  double ema = 0.0;          // time-decayed activation count
};

// One independently snapshotable unit: an expert, a non-expert block, or a
// gate. `capacity` is meaningful for experts only (tokens per batch).
struct OperatorDescriptor {
  uint32_t id = 0;
  OperatorClass cls = OperatorClass::Expert;
  int32_t layer = 0;
  int32_t expert_index = -1;  // within layer, experts only
  int64_t param_count = 0;
  double capacity = 0.0;
  Popularity popularity;

  bool is_expert() const { return cls == OperatorClass::Expert; }

  std::string name() const {
    std::string n = "L" + std::to_string(layer);
    switch (cls) {
      case OperatorClass::Expert: n += ".E" + std::to_string(expert_index); break;
      case OperatorClass::NonExpert: n += ".NE"; break;
      case OperatorClass::Gate: n += ".G"; break;
    }
    return n;
  }
};

// Model description. Either the toy dimensions (token_dim etc.) drive
// per-operator parameter counts, or explicit per-class counts are given for
// calibrated profiles that never run the toy engine.
struct ModelSpec {
  std::string name = "model";
  int32_t layers = 1;
  int32_t experts_per_layer = 1;
  int32_t top_k = 1;
  int32_t shared_experts = 0;
  int64_t tokens_per_sample = 1;

  // Toy-engine dimensions.
  int32_t token_dim = 4;
  int32_t expert_hidden = 4;      // 0 = plain linear expert
  int32_t nonexpert_hidden = 4;   // 0 = plain linear block
  bool residual = true;

  // Explicit parameter counts (calibrated profiles). When set they override
  // the dimension-derived counts.
  std::optional<int64_t> expert_params;
  std::optional<int64_t> nonexpert_params;
  std::optional<int64_t> gate_params;

  double expert_capacity = 0.0;  // tokens/batch; 0 = derived from batch

  int64_t derived_expert_params() const {
    if (expert_params) return *expert_params;
    const int64_t d = token_dim, h = expert_hidden;
    return h > 0 ? 2 * d * h + h + d : d * d + d;
  }
  int64_t derived_nonexpert_params() const {
    if (nonexpert_params) return *nonexpert_params;
    const int64_t d = token_dim, h = nonexpert_hidden;
    return h > 0 ? 2 * d * h + h + d : d * d + d;
  }
  int64_t derived_gate_params() const {
    if (gate_params) return *gate_params;
    return static_cast<int64_t>(experts_per_layer) * token_dim + experts_per_layer;
  }

  // Operator list in layer-major order: E experts, then the non-expert
  // block, then the gate, per layer.
  std::vector<OperatorDescriptor> operators() const {
    std::vector<OperatorDescriptor> ops;
    ops.reserve(static_cast<size_t>(layers) * (experts_per_layer + 2));
    uint32_t id = 0;
    for (int32_t l = 0; l < layers; ++l) {
      for (int32_t e = 0; e < experts_per_layer; ++e) {
        OperatorDescriptor op;
        op.id = id++;
        op.cls = OperatorClass::Expert;
        op.layer = l;
        op.expert_index = e;
        op.param_count = derived_expert_params();
        op.capacity = expert_capacity;
        ops.push_back(op);
      }
      OperatorDescriptor ne;
      ne.id = id++;
      ne.cls = OperatorClass::NonExpert;
      ne.layer = l;
      ne.param_count = derived_nonexpert_params();
      ops.push_back(ne);
      OperatorDescriptor g;
      g.id = id++;
      g.cls = OperatorClass::Gate;
      g.layer = l;
      g.param_count = derived_gate_params();
      ops.push_back(g);
    }
    return ops;
  }

  int64_t operator_count() const {
    return static_cast<int64_t>(layers) * (experts_per_layer + 2);
  }

  int64_t total_params() const {
    return layers * (experts_per_layer * derived_expert_params() +
                     derived_nonexpert_params() + derived_gate_params());
  }

  void check() const {
    if (layers < 1) throw std::invalid_argument("model: layers must be >= 1");
    if (experts_per_layer < 1)
      throw std::invalid_argument("model: experts_per_layer must be >= 1");
    if (top_k < 1 || top_k > experts_per_layer)
      throw std::invalid_argument("model: need 1 <= top_k <= experts_per_layer");
    if (shared_experts < 0 || shared_experts >= experts_per_layer)
      throw std::invalid_argument("model: shared_experts out of range");
  }
};

// NCCL affine cost coefficients per group size.
struct NcclCoeff {
  double alpha = 0.0;  // seconds
  double beta = 0.0;   // seconds per byte
};

struct ClusterSpec {
  int32_t nodes = 1;
  int32_t gpus_per_node = 1;
  double pcie_bandwidth = 1.0;         // bytes/second, GPU -> host
  double replication_bandwidth = 1.0;  // bytes/second, host -> peer hosts
  double persist_bandwidth = 1.0;      // bytes/second, host -> durable store
  double cpu_mem_per_node = 0.0;       // bytes; 0 = unchecked
  std::map<int32_t, NcclCoeff> nccl;

  void check() const {
    if (pcie_bandwidth <= 0 || replication_bandwidth <= 0 || persist_bandwidth <= 0)
      throw std::invalid_argument("cluster: bandwidths must be > 0");
  }
};

struct ParallelPlan {
  int32_t pp_stages = 1;
  int32_t dp_degree = 1;
  int32_t ep_degree = 1;
  int32_t microbatches = 1;      // M, per data-parallel pipeline per iteration
  int64_t microbatch_size = 1;   // samples
  int64_t global_batch = 1;      // samples across all DP pipelines
  // stage assignment per operator id; empty = contiguous layers per stage
  std::vector<int32_t> stage_map;

  int32_t stage_of_layer(int32_t layer, int32_t layers) const {
    return static_cast<int32_t>(
        (static_cast<int64_t>(layer) * pp_stages) / layers);
  }
};

struct ProfiledStats {
  std::vector<double> t_stage;   // seconds per micro-batch per stage
  double t_sync = 0.0;           // seconds
  double t_update = 0.0;         // seconds
  double t_iter_override = 0.0;  // 0 = derive from the model above
};

// === checkpoint size arithmetic =========================================

enum class SnapshotMode : uint8_t { Full = 0, ComputeOnly = 1 };

// One slot of a sparse checkpoint schedule: the operators that snapshot full
// state this iteration, and the ones that ship compute weights because their
// full snapshot comes in a later slot of the same window.
struct ScheduleSlot {
  std::vector<uint32_t> active;
  std::vector<uint32_t> compute_only;
};

// Fixed checkpoint metadata footprint (iteration counter, stream cursor).
inline constexpr int64_t kCheckpointMetadataBytes = 4096;

inline int64_t snapshot_payload_size(const OperatorDescriptor& op,
                                     SnapshotMode mode,
                                     const PrecisionPlan& plan) {
  return mode == SnapshotMode::Full ? op.param_count * plan.full_state_bytes()
                                    : op.param_count * plan.compute_bytes;
}

// Byte composition of a conventional dense checkpoint. The class buckets
// follow what baseline systems actually persist: compute weights as the
// "parameters" entry and master weights bundled with the optimizer moments
// as the "optimizer state" entry.
struct DenseCheckpointSize {
  int64_t payload_bytes = 0;   // sum of Full payloads over all operators
  int64_t metadata_bytes = kCheckpointMetadataBytes;
  int64_t expert_optimizer = 0;
  int64_t expert_params = 0;
  int64_t nonexpert_optimizer = 0;
  int64_t nonexpert_params = 0;

  int64_t total_bytes() const { return payload_bytes + metadata_bytes; }
  int64_t breakdown_total() const {
    return expert_optimizer + expert_params + nonexpert_optimizer +
           nonexpert_params + metadata_bytes;
  }
  double share(int64_t bucket) const {
    return static_cast<double>(bucket) / static_cast<double>(breakdown_total());
  }
};

inline DenseCheckpointSize dense_checkpoint_size(const ModelSpec& model,
                                                 const PrecisionPlan& plan) {
  DenseCheckpointSize out;
  for (const auto& op : model.operators()) {
    out.payload_bytes += snapshot_payload_size(op, SnapshotMode::Full, plan);
    const int64_t opt = op.param_count * (plan.master_bytes + plan.optimizer_bytes);
    const int64_t par = op.param_count * plan.compute_bytes;
    if (op.is_expert()) {
      out.expert_optimizer += opt;
      out.expert_params += par;
    } else {
      out.nonexpert_optimizer += opt;
      out.nonexpert_params += par;
    }
  }
  return out;
}

// === configuration validation ===========================================

struct ValidatedConfig {
  std::vector<std::string> violations;
  bool ok() const { return violations.empty(); }
};

inline ValidatedConfig validate(const ModelSpec& model, const ParallelPlan& plan,
                                const ClusterSpec& cluster) {
  ValidatedConfig v;
  auto fail = [&v](std::string msg) { v.violations.push_back(std::move(msg)); };

  try {
    model.check();
  } catch (const std::exception& e) {
    fail(e.what());
  }
  if (plan.pp_stages < 1) fail("parallel.pp_stages must be >= 1");
  if (plan.dp_degree < 1) fail("parallel.dp_degree must be >= 1");

  if (!plan.stage_map.empty()) {
    const size_t n = static_cast<size_t>(model.operator_count());
    if (plan.stage_map.size() != n) {
      for (size_t id = plan.stage_map.size(); id < n; ++id)
        fail("unmapped operator " + std::to_string(id));
      if (plan.stage_map.size() > n) fail("stage_map longer than operator list");
    }
    for (size_t id = 0; id < plan.stage_map.size() && id < n; ++id) {
      if (plan.stage_map[id] < 0 || plan.stage_map[id] >= plan.pp_stages)
        fail("operator " + std::to_string(id) + " mapped to invalid stage " +
             std::to_string(plan.stage_map[id]));
    }
  }

  if (plan.dp_degree > 0 &&
      plan.microbatches * plan.microbatch_size !=
          plan.global_batch / plan.dp_degree) {
    fail("parallel: microbatches*microbatch_size (" +
         std::to_string(plan.microbatches * plan.microbatch_size) +
         ") != global_batch/dp_degree (" +
         std::to_string(plan.global_batch / plan.dp_degree) + ")");
  }

  if (cluster.pcie_bandwidth <= 0) fail("cluster.pcie_bandwidth must be > 0");
  if (cluster.replication_bandwidth <= 0)
    fail("cluster.replication_bandwidth must be > 0");
  if (plan.dp_degree > 1 && !cluster.nccl.count(plan.dp_degree))
    fail("cluster.nccl missing coefficients for group size " +
         std::to_string(plan.dp_degree));
  return v;
}

}  // namespace moelab
