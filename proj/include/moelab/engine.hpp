// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "moelab/core.hpp"
#include "moelab/digest.hpp"
#include "moelab/rng.hpp"
#include "moelab/tensor.hpp"

namespace moelab {

enum class OperatorMode : uint8_t { Active = 0, Frozen = 1 };

struct OptimizerConfig {
  enum class Kind : uint8_t { Adam = 0, Sgd = 1 };
  Kind kind = Kind::Adam;
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

// Per-operator training state. Masters and moments are binary32; the compute
// copy is the reduced-precision image of the masters (emulated in binary32,
// see quantize). An operator is Active iff masters and moments are resident.
struct OperatorState {
  std::vector<float> master;
  std::vector<float> m;
  std::vector<float> v;
  uint64_t step = 0;
  std::vector<float> compute;
  bool has_full_state = false;

  void refresh_compute(int compute_bytes) {
    compute = master;
    quantize_inplace(compute, compute_bytes);
  }
};

struct TrainState {
  std::vector<OperatorState> ops;  // indexed by operator id
  uint64_t iteration = 0;
  uint64_t data_seed = 0;  // data-stream seed; the cursor is the iteration
};

// Sender-side boundary log. direction 0 = forward activation (owner is the
// upstream stage), 1 = backward gradient (owner is the downstream stage).
struct LogKey {
  uint64_t iteration;
  uint32_t micro_batch;  // global micro-batch id (replica-major)
  uint32_t boundary;     // between stage `boundary` and `boundary + 1`
  uint8_t direction;
  auto operator<=>(const LogKey&) const = default;
};

struct UpstreamLog {
  std::map<LogKey, std::vector<float>> entries;

  static int32_t owner_stage(const LogKey& k) {
    return k.direction == 0 ? static_cast<int32_t>(k.boundary)
                            : static_cast<int32_t>(k.boundary) + 1;
  }

  const std::vector<float>& at(const LogKey& k) const {
    auto it = entries.find(k);
    if (it == entries.end())
      throw std::runtime_error(
          "upstream log missing entry: iteration " + std::to_string(k.iteration) +
          " micro-batch " + std::to_string(k.micro_batch) + " boundary " +
          std::to_string(k.boundary) + (k.direction ? " bwd" : " fwd"));
    return it->second;
  }

  size_t bytes() const {
    size_t b = 0;
    for (const auto& [k, v] : entries) b += v.size() * sizeof(float);
    return b;
  }
};

// Removes entries older than the persisted window start; everything newer is
// still needed for localized replay.
inline void gc_logs(UpstreamLog& log, uint64_t persisted_window_start) {
  std::erase_if(log.entries, [&](const auto& kv) {
    return kv.first.iteration < persisted_window_start;
  });
}

struct EngineConfig {
  ModelSpec model;
  PrecisionPlan precision;
  ParallelPlan parallel;
  OptimizerConfig optimizer;
  uint64_t seed = 1;

  // Constant data stream: every micro-batch carries exactly these tokens and
  // targets. Hand-verifiable setups use this instead of the seeded stream.
  std::vector<float> fixed_tokens;
  std::vector<float> fixed_targets;

  double popularity_decay = 0.9;  // alpha for the time-decayed counters

  void check() const {
    model.check();
    precision.check();
    if (model.top_k + model.shared_experts > model.experts_per_layer)
      throw std::invalid_argument("engine: top_k + shared_experts > experts_per_layer");
    if (parallel.pp_stages > model.layers)
      throw std::invalid_argument("engine: more pipeline stages than layers");
    if (parallel.dp_degree < 1 ||
        parallel.microbatches * parallel.microbatch_size !=
            parallel.global_batch / parallel.dp_degree)
      throw std::invalid_argument(
          "engine: batch size mismatch (microbatches x microbatch_size must "
          "equal global_batch / dp_degree)");
  }
};

namespace detail {

// Weight layouts inside OperatorState::master:
//   expert / non-expert, hidden > 0:  W1[h,d] b1[h] W2[d,h] b2[d]
//   expert / non-expert, hidden == 0: W[d,d] b[d]
//   gate:                             Wg[E,d] bg[E]
inline int64_t mlp_param_count(int64_t d, int64_t h) {
  return h > 0 ? 2 * d * h + h + d : d * d + d;
}

struct TokenCache {
  // per layer caches, filled during forward
  std::vector<std::vector<float>> layer_input;      // x at layer entry
  std::vector<std::vector<float>> ne_hidden;        // tanh(W1 x + b1)
  std::vector<std::vector<float>> gate_scores;      // raw scores, E
  std::vector<std::vector<uint32_t>> selected;      // shared + routed ids
  std::vector<std::vector<float>> gate_weights;     // per selected (1 for shared)
  std::vector<std::vector<std::vector<float>>> expert_hidden;  // per selected
  std::vector<std::vector<std::vector<float>>> expert_out;     // per selected
};

}  // namespace detail

// Deterministic miniature MoE training engine. Single-threaded; all
// reductions accumulate in canonical (replica-major, micro-batch, token)
// order so that any replayed execution is bit-identical.
class Engine {
 public:
  explicit Engine(EngineConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.check();
    ops_meta_ = cfg_.model.operators();
    init_state();
  }

  const EngineConfig& config() const { return cfg_; }
  const TrainState& state() const { return state_; }
  TrainState& mutable_state() { return state_; }
  const std::vector<OperatorDescriptor>& operators() const { return ops_meta_; }
  uint64_t tokens_processed() const { return tokens_processed_; }

  int32_t stages() const { return cfg_.parallel.pp_stages; }
  int32_t stage_of_layer(int32_t layer) const {
    return cfg_.parallel.stage_of_layer(layer, cfg_.model.layers);
  }
  int32_t stage_of_op(uint32_t id) const {
    return stage_of_layer(ops_meta_[id].layer);
  }

  // Popularity statistics live beside the training state: they steer
  // checkpoint scheduling but are not part of the checkpointed state itself.
  std::vector<OperatorDescriptor> descriptors_with_popularity() const {
    return ops_meta_;
  }
  void decay_popularity(double alpha) {
    for (auto& op : ops_meta_) {
      op.popularity.ema = alpha * op.popularity.ema;
    }
  }

  // Advance one training iteration over the global batch. `modes` may mark
  // operators Frozen (forward + input gradients only); nullptr = all Active.
  // When `log` is given, boundary activations and gradients are recorded per
  // micro-batch exactly as the sending stage saw them.
  void run_iteration(const std::map<uint32_t, OperatorMode>* modes = nullptr,
                     UpstreamLog* log = nullptr) {
    const uint64_t it = state_.iteration + 1;
    std::vector<double> counts_before(ops_meta_.size());
    for (const auto& op : ops_meta_)
      counts_before[op.id] = op.popularity.hard_count;

    std::vector<std::vector<float>> grads = make_grad_buffers();
    const int32_t S = cfg_.parallel.pp_stages;
    run_scoped(state_.ops, it, 0, S - 1, modes, grads, log, nullptr, true);
    apply_updates(state_.ops, grads, modes);
    state_.iteration = it;

    const double alpha = cfg_.popularity_decay;
    for (auto& op : ops_meta_) {
      const double batch = op.popularity.hard_count - counts_before[op.id];
      op.popularity.ema = alpha * op.popularity.ema + (1.0 - alpha) * batch;
    }
  }

  // Replay one iteration touching only stages [stage_lo, stage_hi] of a
  // scratch operator vector. Boundary tensors that would come from stages
  // outside the scope are read from `boundary_log`. Used by localized
  // recovery; with the full stage range and no log it is an ordinary
  // iteration on `ops`.
  void replay_scoped_iteration(std::vector<OperatorState>& ops, uint64_t iteration,
                               int32_t stage_lo, int32_t stage_hi,
                               const std::map<uint32_t, OperatorMode>* modes,
                               const UpstreamLog* boundary_log) {
    std::vector<std::vector<float>> grads = make_grad_buffers();
    run_scoped(ops, iteration, stage_lo, stage_hi, modes, grads, nullptr,
               boundary_log, false);
    apply_updates(ops, grads, modes, stage_lo, stage_hi);
  }

  // --- data stream -------------------------------------------------------
  // Micro-batch b of iteration t on replica r is a pure function of
  // (seed, t, r, b); replay never stores data.
  std::vector<float> batch_tokens(uint64_t iteration, int32_t replica,
                                  int32_t micro_batch) const {
    if (!cfg_.fixed_tokens.empty()) return cfg_.fixed_tokens;
    return stream_values("tokens", iteration, replica, micro_batch);
  }
  std::vector<float> batch_targets(uint64_t iteration, int32_t replica,
                                   int32_t micro_batch) const {
    if (!cfg_.fixed_targets.empty()) return cfg_.fixed_targets;
    return stream_values("targets", iteration, replica, micro_batch);
  }

  int64_t tokens_per_iteration() const {
    return static_cast<int64_t>(cfg_.parallel.dp_degree) *
           cfg_.parallel.microbatches * cfg_.parallel.microbatch_size;
  }

  // --- serialization ------------------------------------------------------
  std::vector<uint8_t> serialize_state() const { return serialize_state(state_); }

  static std::vector<uint8_t> serialize_state(const TrainState& st) {
    ByteWriter w;
    w.value<uint32_t>(0x4d4c5354u);  // "MLST"
    w.value<uint32_t>(1u);
    w.value<uint64_t>(st.iteration);
    w.value<uint64_t>(st.data_seed);
    w.value<uint32_t>(static_cast<uint32_t>(st.ops.size()));
    for (const auto& op : st.ops) {
      w.value<uint64_t>(op.step);
      w.value<uint64_t>(op.master.size());
      w.floats(op.master);
      w.floats(op.m);
      w.floats(op.v);
    }
    return std::move(w.buf);
  }

  Sha256 state_digest() const { return sha256(serialize_state()); }

  Sha256 stage_digest(int32_t stage) const {
    ByteWriter w;
    for (const auto& meta : ops_meta_) {
      if (stage_of_op(meta.id) != stage) continue;
      const auto& op = state_.ops[meta.id];
      w.value<uint32_t>(meta.id);
      w.value<uint64_t>(op.step);
      w.floats(op.master);
      w.floats(op.m);
      w.floats(op.v);
    }
    return sha256(w.buf);
  }

 private:
  void init_state() {
    state_.ops.resize(ops_meta_.size());
    state_.data_seed = cfg_.seed;
    Rng root(cfg_.seed);
    for (const auto& meta : ops_meta_) {
      auto& op = state_.ops[meta.id];
      Rng r = root.substream("init", meta.id);
      op.master.resize(static_cast<size_t>(meta.param_count));
      const double scale = 0.5 / std::sqrt(static_cast<double>(cfg_.model.token_dim));
      for (auto& wv : op.master)
        wv = static_cast<float>(r.uniform(-scale, scale));
      op.m.assign(op.master.size(), 0.0f);
      op.v.assign(op.master.size(), 0.0f);
      op.step = 0;
      op.has_full_state = true;
      op.refresh_compute(static_cast<int>(cfg_.precision.compute_bytes));
    }
  }

  std::vector<float> stream_values(const char* label, uint64_t iteration,
                                   int32_t replica, int32_t micro_batch) const {
    const auto& p = cfg_.parallel;
    const uint64_t idx =
        (iteration * static_cast<uint64_t>(p.dp_degree) + replica) *
            static_cast<uint64_t>(p.microbatches) +
        micro_batch;
    Rng r = Rng(state_.data_seed).substream(label, idx);
    std::vector<float> out(static_cast<size_t>(p.microbatch_size) *
                           cfg_.model.token_dim);
    for (auto& v : out) v = static_cast<float>(r.uniform(-1.0, 1.0));
    return out;
  }

  std::vector<std::vector<float>> make_grad_buffers() const {
    std::vector<std::vector<float>> g(ops_meta_.size());
    for (const auto& meta : ops_meta_)
      g[meta.id].assign(static_cast<size_t>(meta.param_count), 0.0f);
    return g;
  }

  static bool is_active(const std::map<uint32_t, OperatorMode>* modes, uint32_t id) {
    if (!modes) return true;
    auto it = modes->find(id);
    if (it == modes->end())
      throw std::runtime_error("mode map missing operator " + std::to_string(id));
    return it->second == OperatorMode::Active;
  }

  // Forward + backward over every micro-batch of one iteration, restricted
  // to stages [stage_lo, stage_hi]. Accumulates weight gradients for Active
  // operators into `grads`. `log_out` records sender-side boundary tensors;
  // `log_in` supplies boundary tensors at the scope edges.
  void run_scoped(std::vector<OperatorState>& ops, uint64_t iteration,
                  int32_t stage_lo, int32_t stage_hi,
                  const std::map<uint32_t, OperatorMode>* modes,
                  std::vector<std::vector<float>>& grads, UpstreamLog* log_out,
                  const UpstreamLog* log_in, bool update_popularity) {
    const auto& par = cfg_.parallel;
    const int32_t S = par.pp_stages;
    const int64_t mb = par.microbatch_size;
    const float inv_tokens =
        1.0f / static_cast<float>(tokens_per_iteration());

    // layers covered by the stage range
    int32_t layer_lo = cfg_.model.layers, layer_hi = -1;
    for (int32_t l = 0; l < cfg_.model.layers; ++l) {
      const int32_t s = stage_of_layer(l);
      if (s >= stage_lo && s <= stage_hi) {
        layer_lo = std::min(layer_lo, l);
        layer_hi = std::max(layer_hi, l);
      }
    }
    if (layer_hi < layer_lo)
      throw std::runtime_error("stage range covers no layers");

    for (int32_t r = 0; r < par.dp_degree; ++r) {
      for (int32_t b = 0; b < par.microbatches; ++b) {
        const uint32_t gmb = static_cast<uint32_t>(r) * par.microbatches + b;

        // ---- forward ----
        std::vector<float> acts;
        if (stage_lo == 0) {
          acts = batch_tokens(iteration, r, b);
        } else {
          acts = log_in->at({iteration, gmb,
                             static_cast<uint32_t>(stage_lo - 1), 0});
        }

        detail::TokenCache cache;
        const int32_t nl = layer_hi - layer_lo + 1;
        cache.layer_input.resize(nl);
        cache.ne_hidden.resize(nl);
        cache.gate_scores.resize(nl);
        cache.selected.resize(nl);
        cache.gate_weights.resize(nl);
        cache.expert_hidden.resize(nl);
        cache.expert_out.resize(nl);

        int32_t cur_stage = stage_lo;
        for (int32_t l = layer_lo; l <= layer_hi; ++l) {
          const int32_t ls = stage_of_layer(l);
          if (ls != cur_stage) {
            // crossing a boundary inside the scope: record sender-side copy
            if (log_out)
              log_out->entries[{iteration, gmb,
                                static_cast<uint32_t>(ls - 1), 0}] = acts;
            cur_stage = ls;
          }
          forward_layer(ops, l, acts, cache, l - layer_lo, mb,
                        update_popularity);
        }
        // ---- loss head / injected gradient ----
        std::vector<float> grad_acts(acts.size());
        if (stage_hi == S - 1) {
          const std::vector<float> targets = batch_targets(iteration, r, b);
          for (size_t i = 0; i < acts.size(); ++i)
            grad_acts[i] = (acts[i] - targets[i]) * inv_tokens;
        } else {
          grad_acts = log_in->at({iteration, gmb,
                                  static_cast<uint32_t>(stage_hi), 1});
        }

        // ---- backward ----
        cur_stage = stage_of_layer(layer_hi);
        for (int32_t l = layer_hi; l >= layer_lo; --l) {
          const int32_t ls = stage_of_layer(l);
          if (ls != cur_stage) {
            if (log_out)
              log_out->entries[{iteration, gmb, static_cast<uint32_t>(ls), 1}] =
                  grad_acts;
            cur_stage = ls;
          }
          backward_layer(ops, l, grad_acts, cache, l - layer_lo, mb, modes,
                         grads);
        }
      }
    }
  }

  // y = [x +] ne(x) + sum_shared e_j(x) + sum_topk w_j e_j(x), per token.
  void forward_layer(std::vector<OperatorState>& ops, int32_t layer,
                     std::vector<float>& acts, detail::TokenCache& cache,
                     int32_t ci, int64_t mb, bool update_popularity) {
    const int32_t d = cfg_.model.token_dim;
    const int32_t E = cfg_.model.experts_per_layer;
    const int32_t shared = cfg_.model.shared_experts;
    const int32_t routed = cfg_.model.top_k;
    const uint32_t base = static_cast<uint32_t>(layer) * (E + 2);
    const uint32_t ne_id = base + E;
    const uint32_t gate_id = base + E + 1;

    cache.layer_input[ci] = acts;
    cache.ne_hidden[ci].assign(static_cast<size_t>(mb) * cfg_.model.nonexpert_hidden, 0.0f);
    cache.gate_scores[ci].assign(static_cast<size_t>(mb) * E, 0.0f);
    cache.selected[ci].clear();
    cache.gate_weights[ci].clear();
    cache.expert_hidden[ci].assign(mb, {});
    cache.expert_out[ci].assign(mb, {});

    std::vector<float> out(acts.size(), 0.0f);
    const auto& gate = ops[gate_id].compute;

    for (int64_t t = 0; t < mb; ++t) {
      const float* x = acts.data() + t * d;
      float* y = out.data() + t * d;
      if (cfg_.model.residual)
        for (int32_t i = 0; i < d; ++i) y[i] = x[i];

      // non-expert block
      {
        std::vector<float> tmp_hidden;
        mlp_forward(ops[ne_id].compute, cfg_.model.nonexpert_hidden, x, y,
                    &tmp_hidden);
        if (cfg_.model.nonexpert_hidden > 0)
          std::copy(tmp_hidden.begin(), tmp_hidden.end(),
                    cache.ne_hidden[ci].begin() + t * cfg_.model.nonexpert_hidden);
      }

      // gate scores
      float* scores = cache.gate_scores[ci].data() + t * E;
      for (int32_t e = 0; e < E; ++e) {
        float s = gate[static_cast<size_t>(E) * d + e];  // bias
        const float* row = gate.data() + static_cast<size_t>(e) * d;
        for (int32_t i = 0; i < d; ++i) s += row[i] * x[i];
        scores[e] = s;
      }

      // top-k routed experts among [shared, E); ties go to the lower index
      std::vector<uint32_t> sel;
      sel.reserve(shared + routed);
      for (int32_t e = 0; e < shared; ++e) sel.push_back(e);
      {
        std::vector<int32_t> idx(E - shared);
        std::iota(idx.begin(), idx.end(), shared);
        std::stable_sort(idx.begin(), idx.end(), [&](int32_t a, int32_t b2) {
          if (scores[a] != scores[b2]) return scores[a] > scores[b2];
          return a < b2;
        });
        idx.resize(routed);
        std::sort(idx.begin(), idx.end());
        for (int32_t e : idx) sel.push_back(static_cast<uint32_t>(e));
      }

      // softmax over the routed selection
      std::vector<float> weights(sel.size(), 1.0f);
      {
        float mx = -std::numeric_limits<float>::infinity();
        for (size_t k = shared; k < sel.size(); ++k)
          mx = std::max(mx, scores[sel[k]]);
        float denom = 0.0f;
        for (size_t k = shared; k < sel.size(); ++k)
          denom += std::exp(scores[sel[k]] - mx);
        for (size_t k = shared; k < sel.size(); ++k)
          weights[k] = std::exp(scores[sel[k]] - mx) / denom;
      }

      // expert evaluation
      auto& eh = cache.expert_hidden[ci][t];
      auto& eo = cache.expert_out[ci][t];
      eh.assign(sel.size() * std::max<int64_t>(cfg_.model.expert_hidden, 1), 0.0f);
      eo.assign(sel.size() * d, 0.0f);
      for (size_t k = 0; k < sel.size(); ++k) {
        const uint32_t eid = base + sel[k];
        std::vector<float> hid;
        std::vector<float> eout(d, 0.0f);
        mlp_forward(ops[eid].compute, cfg_.model.expert_hidden, x, eout.data(),
                    &hid);
        if (cfg_.model.expert_hidden > 0)
          std::copy(hid.begin(), hid.end(),
                    eh.begin() + k * cfg_.model.expert_hidden);
        std::copy(eout.begin(), eout.end(), eo.begin() + k * d);
        for (int32_t i = 0; i < d; ++i) y[i] += weights[k] * eout[i];
      }

      for (uint32_t s : sel) cache.selected[ci].push_back(s);
      for (float w : weights) cache.gate_weights[ci].push_back(w);

      if (update_popularity) {
        for (uint32_t s : sel) ops_meta_[base + s].popularity.hard_count += 1.0;
        ops_meta_[ne_id].popularity.hard_count += 1.0;
        ops_meta_[gate_id].popularity.hard_count += 1.0;
        // full softmax over all experts for the soft count
        float mx = *std::max_element(scores, scores + E);
        float denom = 0.0f;
        for (int32_t e = 0; e < E; ++e) denom += std::exp(scores[e] - mx);
        for (int32_t e = 0; e < E; ++e)
          ops_meta_[base + e].popularity.soft_count +=
              std::exp(scores[e] - mx) / denom;
      }
    }
    acts = std::move(out);
    if (update_popularity) tokens_processed_ += mb;
  }

  void backward_layer(std::vector<OperatorState>& ops, int32_t layer,
                      std::vector<float>& grad_out, detail::TokenCache& cache,
                      int32_t ci, int64_t mb,
                      const std::map<uint32_t, OperatorMode>* modes,
                      std::vector<std::vector<float>>& grads) {
    const int32_t d = cfg_.model.token_dim;
    const int32_t E = cfg_.model.experts_per_layer;
    const int32_t shared = cfg_.model.shared_experts;
    const uint32_t base = static_cast<uint32_t>(layer) * (E + 2);
    const uint32_t ne_id = base + E;
    const uint32_t gate_id = base + E + 1;
    const size_t sel_count = cache.selected[ci].size() / mb;

    const bool ne_active = is_active(modes, ne_id);
    const bool gate_active = is_active(modes, gate_id);

    std::vector<float> grad_in(grad_out.size(), 0.0f);
    for (int64_t t = 0; t < mb; ++t) {
      const float* x = cache.layer_input[ci].data() + t * d;
      const float* dy = grad_out.data() + t * d;
      float* dx = grad_in.data() + t * d;

      if (cfg_.model.residual)
        for (int32_t i = 0; i < d; ++i) dx[i] += dy[i];

      // non-expert block
      mlp_backward(ops[ne_id].compute, cfg_.model.nonexpert_hidden, x,
                   cache.ne_hidden[ci].data() + t * cfg_.model.nonexpert_hidden,
                   dy, dx, ne_active ? grads[ne_id].data() : nullptr);

      // experts and gate
      const uint32_t* sel = cache.selected[ci].data() + t * sel_count;
      const float* weights = cache.gate_weights[ci].data() + t * sel_count;
      const auto& eh = cache.expert_hidden[ci][t];
      const auto& eo = cache.expert_out[ci][t];
      const float* scores = cache.gate_scores[ci].data() + t * E;

      std::vector<float> dweights(sel_count, 0.0f);
      for (size_t k = 0; k < sel_count; ++k) {
        const uint32_t eid = base + sel[k];
        const bool e_active = is_active(modes, eid);
        // dL/d e_out = w_k * dy ; also dL/dw_k = dy . e_out
        std::vector<float> de(d);
        for (int32_t i = 0; i < d; ++i) de[i] = weights[k] * dy[i];
        for (int32_t i = 0; i < d; ++i) dweights[k] += dy[i] * eo[k * d + i];
        mlp_backward(ops[eid].compute, cfg_.model.expert_hidden, x,
                     eh.data() + k * std::max<int64_t>(cfg_.model.expert_hidden, 1),
                     de.data(), dx, e_active ? grads[eid].data() : nullptr);
      }

      // softmax backward over routed selection -> gate score grads
      if (sel_count > static_cast<size_t>(shared)) {
        float dot = 0.0f;
        for (size_t k = shared; k < sel_count; ++k)
          dot += dweights[k] * weights[k];
        for (size_t k = shared; k < sel_count; ++k) {
          const float ds = weights[k] * (dweights[k] - dot);
          const uint32_t e = sel[k];
          const auto& gate = ops[gate_id].compute;
          const float* row = gate.data() + static_cast<size_t>(e) * d;
          if (gate_active) {
            float* gg = grads[gate_id].data();
            for (int32_t i = 0; i < d; ++i)
              gg[static_cast<size_t>(e) * d + i] += ds * x[i];
            gg[static_cast<size_t>(E) * d + e] += ds;
          }
          for (int32_t i = 0; i < d; ++i) dx[i] += ds * row[i];
        }
      }
      (void)scores;
    }
    grad_out = std::move(grad_in);
  }

  // out += W2 tanh(W1 x + b1) + b2   (hidden > 0)
  // out += W x + b                   (hidden == 0)
  void mlp_forward(const std::vector<float>& w, int32_t hidden, const float* x,
                   float* out, std::vector<float>* hidden_cache) const {
    const int32_t d = cfg_.model.token_dim;
    if (hidden > 0) {
      const float* W1 = w.data();
      const float* b1 = w.data() + static_cast<size_t>(hidden) * d;
      const float* W2 = b1 + hidden;
      const float* b2 = W2 + static_cast<size_t>(d) * hidden;
      std::vector<float> h(hidden);
      for (int32_t j = 0; j < hidden; ++j) {
        float s = b1[j];
        const float* row = W1 + static_cast<size_t>(j) * d;
        for (int32_t i = 0; i < d; ++i) s += row[i] * x[i];
        h[j] = std::tanh(s);
      }
      for (int32_t i = 0; i < d; ++i) {
        float s = b2[i];
        const float* row = W2 + static_cast<size_t>(i) * hidden;
        for (int32_t j = 0; j < hidden; ++j) s += row[j] * h[j];
        out[i] += s;
      }
      if (hidden_cache) *hidden_cache = std::move(h);
    } else {
      const float* W = w.data();
      const float* b = w.data() + static_cast<size_t>(d) * d;
      for (int32_t i = 0; i < d; ++i) {
        float s = b[i];
        const float* row = W + static_cast<size_t>(i) * d;
        for (int32_t j = 0; j < d; ++j) s += row[j] * x[j];
        out[i] += s;
      }
      if (hidden_cache) hidden_cache->clear();
    }
  }

  // Input gradients are always produced; weight gradients only when
  // `wgrad` is non-null (frozen operators skip them).
  void mlp_backward(const std::vector<float>& w, int32_t hidden, const float* x,
                    const float* hidden_vals, const float* dy, float* dx,
                    float* wgrad) const {
    const int32_t d = cfg_.model.token_dim;
    if (hidden > 0) {
      const float* W1 = w.data();
      const float* W2 = w.data() + static_cast<size_t>(hidden) * d + hidden;
      float* gW1 = wgrad;
      float* gb1 = wgrad ? wgrad + static_cast<size_t>(hidden) * d : nullptr;
      float* gW2 = wgrad ? gb1 + hidden : nullptr;
      float* gb2 = wgrad ? gW2 + static_cast<size_t>(d) * hidden : nullptr;

      std::vector<float> dh(hidden, 0.0f);
      for (int32_t i = 0; i < d; ++i) {
        const float g = dy[i];
        const float* row = W2 + static_cast<size_t>(i) * hidden;
        for (int32_t j = 0; j < hidden; ++j) dh[j] += row[j] * g;
        if (wgrad) {
          float* grow = gW2 + static_cast<size_t>(i) * hidden;
          for (int32_t j = 0; j < hidden; ++j) grow[j] += hidden_vals[j] * g;
          gb2[i] += g;
        }
      }
      for (int32_t j = 0; j < hidden; ++j) {
        const float t = hidden_vals[j];
        dh[j] *= (1.0f - t * t);
      }
      for (int32_t j = 0; j < hidden; ++j) {
        const float g = dh[j];
        const float* row = W1 + static_cast<size_t>(j) * d;
        for (int32_t i = 0; i < d; ++i) dx[i] += row[i] * g;
        if (wgrad) {
          float* grow = gW1 + static_cast<size_t>(j) * d;
          for (int32_t i = 0; i < d; ++i) grow[i] += x[i] * g;
          gb1[j] += g;
        }
      }
    } else {
      const float* W = w.data();
      for (int32_t i = 0; i < d; ++i) {
        const float g = dy[i];
        const float* row = W + static_cast<size_t>(i) * d;
        for (int32_t j = 0; j < d; ++j) dx[j] += row[j] * g;
        if (wgrad) {
          float* grow = wgrad + static_cast<size_t>(i) * d;
          for (int32_t j = 0; j < d; ++j) grow[j] += x[j] * g;
          wgrad[static_cast<size_t>(d) * d + i] += g;
        }
      }
    }
  }

  void apply_updates(std::vector<OperatorState>& ops,
                     const std::vector<std::vector<float>>& grads,
                     const std::map<uint32_t, OperatorMode>* modes,
                     int32_t stage_lo = 0, int32_t stage_hi = 1 << 30) {
    const auto& oc = cfg_.optimizer;
    for (const auto& meta : ops_meta_) {
      const int32_t s = stage_of_op(meta.id);
      if (s < stage_lo || s > stage_hi) continue;
      if (!is_active(modes, meta.id)) continue;
      auto& op = ops[meta.id];
      const auto& g = grads[meta.id];
      if (oc.kind == OptimizerConfig::Kind::Sgd) {
        for (size_t i = 0; i < op.master.size(); ++i)
          op.master[i] -= oc.lr * g[i];
        op.step += 1;
      } else {
        op.step += 1;
        const float bc1 = 1.0f - std::pow(oc.beta1, static_cast<float>(op.step));
        const float bc2 = 1.0f - std::pow(oc.beta2, static_cast<float>(op.step));
        for (size_t i = 0; i < op.master.size(); ++i) {
          op.m[i] = oc.beta1 * op.m[i] + (1.0f - oc.beta1) * g[i];
          op.v[i] = oc.beta2 * op.v[i] + (1.0f - oc.beta2) * g[i] * g[i];
          const float mhat = op.m[i] / bc1;
          const float vhat = op.v[i] / bc2;
          op.master[i] -= oc.lr * mhat / (std::sqrt(vhat) + oc.eps);
        }
      }
      op.refresh_compute(static_cast<int>(cfg_.precision.compute_bytes));
    }
  }

  EngineConfig cfg_;
  std::vector<OperatorDescriptor> ops_meta_;
  TrainState state_;
  uint64_t tokens_processed_ = 0;
};

// Standalone Adam step matching the engine's arithmetic; exposed for direct
// verification against hand-computed values.
inline void optimizer_step_adam(std::vector<float>& master, std::vector<float>& m,
                                std::vector<float>& v, uint64_t& step,
                                const std::vector<float>& grad,
                                const OptimizerConfig& oc) {
  if (grad.size() != master.size() || m.size() != master.size() ||
      v.size() != master.size())
    throw std::invalid_argument("adam: shape mismatch");
  step += 1;
  const float bc1 = 1.0f - std::pow(oc.beta1, static_cast<float>(step));
  const float bc2 = 1.0f - std::pow(oc.beta2, static_cast<float>(step));
  for (size_t i = 0; i < master.size(); ++i) {
    m[i] = oc.beta1 * m[i] + (1.0f - oc.beta1) * grad[i];
    v[i] = oc.beta2 * v[i] + (1.0f - oc.beta2) * grad[i] * grad[i];
    master[i] -= oc.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + oc.eps);
  }
}

}  // namespace moelab
