// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "moelab/rng.hpp"

namespace moelab {

// Fraction of tokens assigned to each expert; sums to one.
struct PopularityVector {
  std::vector<double> p;

  int32_t experts() const { return static_cast<int32_t>(p.size()); }

  void check() const {
    if (p.size() < 2)
      throw std::invalid_argument("popularity: need at least 2 experts");
    double sum = 0;
    for (double v : p) {
      if (v < 0) throw std::invalid_argument("popularity: negative share");
      sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-12)
      throw std::invalid_argument("popularity: shares must sum to 1");
  }
};

// Herfindahl-Hirschman concentration index.
inline double hhi(const PopularityVector& pv) {
  pv.check();
  double s = 0;
  for (double v : pv.p) s += v * v;
  return s;
}

// Normalized skewness: 0 at uniform, 1 at one-hot.
inline double skewness(const PopularityVector& pv) {
  const double e = static_cast<double>(pv.experts());
  return (hhi(pv) - 1.0 / e) / (1.0 - 1.0 / e);
}

inline double skewness_from_hhi(double h, int32_t experts) {
  const double e = static_cast<double>(experts);
  return (h - 1.0 / e) / (1.0 - 1.0 / e);
}

// Inverts E[HHI] = (alpha+1)/(alpha*E+1) for the symmetric Dirichlet
// concentration that hits a target skewness. S = 0 means uniform (alpha
// diverges); S = 1 has no finite alpha and is rejected.
inline double alpha_for_skew(double s_target, int32_t experts) {
  if (experts < 2) throw std::invalid_argument("alpha_for_skew: need E >= 2");
  if (s_target < 0 || s_target >= 1)
    throw std::invalid_argument("alpha_for_skew: need 0 <= S < 1");
  const double e = static_cast<double>(experts);
  const double hhi_target = s_target * (1.0 - 1.0 / e) + 1.0 / e;
  if (s_target == 0) return std::numeric_limits<double>::infinity();
  return (1.0 - hhi_target) / (hhi_target * e - 1.0);
}

inline double expected_skewness_for_alpha(double alpha, int32_t experts) {
  const double e = static_cast<double>(experts);
  const double h = std::isinf(alpha) ? 1.0 / e : (alpha + 1.0) / (alpha * e + 1.0);
  return skewness_from_hhi(h, experts);
}

// One draw from the symmetric Dirichlet(alpha). Gamma draws are taken in log
// space and normalized with log-sum-exp so very small alpha stays exact.
inline PopularityVector sample_popularity(double alpha, int32_t experts, Rng& rng) {
  if (experts < 2) throw std::invalid_argument("sample_popularity: need E >= 2");
  PopularityVector pv;
  pv.p.resize(experts);
  if (std::isinf(alpha)) {
    std::fill(pv.p.begin(), pv.p.end(), 1.0 / experts);
    return pv;
  }
  if (alpha <= 0) throw std::invalid_argument("sample_popularity: alpha must be > 0");
  std::vector<double> logs(experts);
  double mx = -std::numeric_limits<double>::infinity();
  for (auto& lg : logs) {
    lg = rng.log_gamma_draw(alpha);
    mx = std::max(mx, lg);
  }
  double denom = 0;
  for (double lg : logs) denom += std::exp(lg - mx);
  double sum = 0;
  for (int32_t i = 0; i < experts; ++i) {
    pv.p[i] = std::exp(logs[i] - mx) / denom;
    sum += pv.p[i];
  }
  // renormalize away the last few ulps
  for (auto& v : pv.p) v /= sum;
  return pv;
}

// Deterministic two-level popularity with exact target skewness: one hot
// expert plus a uniform tail. Unlike raw Dirichlet draws at high skewness,
// the tail keeps a positive floor so every expert still receives tokens at
// realistic batch sizes.
inline PopularityVector popularity_with_skew(double s_target, int32_t experts) {
  if (experts < 2) throw std::invalid_argument("popularity_with_skew: need E >= 2");
  if (s_target < 0 || s_target >= 1)
    throw std::invalid_argument("popularity_with_skew: need 0 <= S < 1");
  const double e = static_cast<double>(experts);
  const double h = s_target * (1.0 - 1.0 / e) + 1.0 / e;
  // solve p0^2 + (1-p0)^2/(E-1) = h, taking the hot root
  const double a = e / (e - 1.0);
  const double b = -2.0 / (e - 1.0);
  const double c = 1.0 / (e - 1.0) - h;
  const double disc = b * b - 4 * a * c;
  const double p0 = (-b + std::sqrt(std::max(0.0, disc))) / (2 * a);
  PopularityVector pv;
  pv.p.assign(experts, (1.0 - p0) / (e - 1.0));
  pv.p[0] = p0;
  return pv;
}

// === routing traces =======================================================

struct RoutingIteration {
  std::vector<int64_t> expert_tokens;  // tokens routed per expert (one layer)
  int32_t active_experts = 0;
};

struct RoutingTrace {
  int32_t experts = 0;
  int32_t top_k = 0;
  int64_t tokens_per_iter = 0;
  std::vector<RoutingIteration> iterations;
};

struct DriftSpec {
  int64_t resample_every = 0;  // 0 = static popularity
  double alpha = 0.1;          // Dirichlet concentration for re-draws
};

// Route tokens_per_iter tokens per iteration to top_k experts sampled
// without replacement proportional to p (sequential renormalization via
// Gumbel keys). The optional drift spec re-samples p every D iterations.
inline RoutingTrace gen_routing_trace(const PopularityVector& popularity,
                                      int32_t top_k, int64_t iterations,
                                      int64_t tokens_per_iter,
                                      const DriftSpec& drift, Rng& rng) {
  if (tokens_per_iter < 1)
    throw std::invalid_argument("routing trace: tokens_per_iter must be >= 1");
  const int32_t e = popularity.experts();
  if (top_k > e) throw std::invalid_argument("routing trace: top_k > E");

  RoutingTrace trace;
  trace.experts = e;
  trace.top_k = top_k;
  trace.tokens_per_iter = tokens_per_iter;

  PopularityVector p = popularity;
  std::vector<double> logp(e);
  auto refresh_logp = [&]() {
    for (int32_t i = 0; i < e; ++i)
      logp[i] = p.p[i] > 0 ? std::log(p.p[i])
                           : -std::numeric_limits<double>::infinity();
  };
  refresh_logp();

  std::vector<double> keys(e);
  std::vector<int32_t> idx(e);
  for (int64_t it = 0; it < iterations; ++it) {
    if (drift.resample_every > 0 && it > 0 && it % drift.resample_every == 0) {
      p = sample_popularity(drift.alpha, e, rng);
      refresh_logp();
    }
    RoutingIteration ri;
    ri.expert_tokens.assign(e, 0);
    for (int64_t t = 0; t < tokens_per_iter; ++t) {
      // Gumbel top-k == sequential sampling without replacement prop. to p
      for (int32_t i = 0; i < e; ++i) {
        double u = rng.uniform();
        while (u <= 0.0) u = rng.uniform();
        keys[i] = logp[i] - std::log(-std::log(u));
      }
      std::iota(idx.begin(), idx.end(), 0);
      std::partial_sort(idx.begin(), idx.begin() + top_k, idx.end(),
                        [&](int32_t a, int32_t b) { return keys[a] > keys[b]; });
      for (int32_t k = 0; k < top_k; ++k) ri.expert_tokens[idx[k]] += 1;
    }
    for (int64_t c : ri.expert_tokens)
      if (c > 0) ri.active_experts += 1;
    trace.iterations.push_back(std::move(ri));
  }
  return trace;
}

struct ActiveExpertStats {
  std::vector<int32_t> active_per_iteration;
  std::vector<int64_t> tokens_per_expert;  // summed over iterations
  int32_t median_active = 0;
};

inline ActiveExpertStats active_expert_stats(const RoutingTrace& trace) {
  if (trace.iterations.empty())
    throw std::invalid_argument("active_expert_stats: empty trace");
  ActiveExpertStats st;
  st.tokens_per_expert.assign(trace.experts, 0);
  for (const auto& it : trace.iterations) {
    st.active_per_iteration.push_back(it.active_experts);
    for (int32_t i = 0; i < trace.experts; ++i)
      st.tokens_per_expert[i] += it.expert_tokens[i];
  }
  std::vector<int32_t> sorted = st.active_per_iteration;
  std::sort(sorted.begin(), sorted.end());
  st.median_active = sorted[sorted.size() / 2];
  return st;
}

}  // namespace moelab
