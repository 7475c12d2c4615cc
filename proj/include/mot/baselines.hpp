#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "mot/mot_layer.hpp"
#include "mot/ops.hpp"
#include "mot/tensor.hpp"

// Discrete routing baselines. Forward-only fixtures that reuse the MoT
// parameter layout and controller scores but route with hard selections.

namespace mot {

enum class RoutingKind { expert_choice, token_choice };

struct RoutingAssignment {
  RoutingKind kind = RoutingKind::expert_choice;
  std::size_t group_size = 0;
  std::size_t n_experts = 0;
  std::size_t capacity = 0;  // token choice only
  // Expert choice: chosen token per expert.
  std::vector<std::size_t> token_for_expert;
  // Token choice: preferred expert per token, and whether that expert
  // accepted it.
  std::vector<std::size_t> expert_for_token;
  std::vector<bool> dropped;
};

template <typename T>
struct RoutedOutput {
  Tensor<T> output;  // [g x d]
  RoutingAssignment assignment;
};

namespace detail {

// Two-layer FFN of expert e on a single token, by explicit loops.
template <typename T>
Buffer<T> expert_ffn_loop(const MoTLayerParams<T>& p, std::size_t e,
                               std::span<const T> token) {
  const std::size_t d = p.d_model(), h = p.expert_hidden();
  const T* w1 = p.expert_w1.data().data() + e * d * h;
  const T* b1 = p.expert_b1.data().data() + e * h;
  const T* w2 = p.expert_w2.data().data() + e * h * d;
  const T* b2 = p.expert_b2.data().data() + e * d;
  Buffer<T> hidden(h);
  for (std::size_t j = 0; j < h; ++j) {
    T acc = b1[j];
    for (std::size_t c = 0; c < d; ++c) acc += token[c] * w1[c * h + j];
    hidden[j] = gelu_value(acc);
  }
  Buffer<T> out(d);
  for (std::size_t c = 0; c < d; ++c) {
    T acc = b2[c];
    for (std::size_t j = 0; j < h; ++j) acc += hidden[j] * w2[j * d + c];
    out[c] = acc;
  }
  return out;
}

template <typename T>
Tensor<T> group_scores(const Tensor<T>& group, const MoTLayerParams<T>& params) {
  require_rank(group.shape(), 2, "routing");
  if (group.dim(1) != params.d_model()) {
    throw DimensionError("routing: group " + group.shape_string() +
                         " does not match d_model " + std::to_string(params.d_model()));
  }
  NoGradGuard no_grad;
  return controller_scores(group, params);
}

}  // namespace detail

/// Each expert takes its highest-scoring token (lowest index on ties) and
/// adds its FFN output to that token with weight 1.
template <typename T>
RoutedOutput<T> expert_choice_forward(const Tensor<T>& group, const MoTLayerParams<T>& params) {
  const auto scores = detail::group_scores(group, params);
  const std::size_t g = group.dim(0), d = group.dim(1), E = params.n_experts();
  const auto s = scores.data();
  const auto x = group.data();
  RoutingAssignment a;
  a.kind = RoutingKind::expert_choice;
  a.group_size = g;
  a.n_experts = E;
  a.token_for_expert.resize(E);
  Buffer<T> out(g * d, T(0));
  for (std::size_t e = 0; e < E; ++e) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < g; ++i) {
      if (s[i * E + e] > s[best * E + e]) best = i;
    }
    a.token_for_expert[e] = best;
    const auto y = detail::expert_ffn_loop(params, e, x.subspan(best * d, d));
    for (std::size_t c = 0; c < d; ++c) out[best * d + c] += y[c];
  }
  return {Tensor<T>({g, d}, std::move(out)), std::move(a)};
}

/// Switch-style routing: each token goes to its top expert, in group order,
/// until that expert holds `capacity` tokens; later tokens are dropped and
/// get zero output. Routed outputs are scaled by the softmax gate.
template <typename T>
RoutedOutput<T> token_choice_forward(const Tensor<T>& group, const MoTLayerParams<T>& params,
                                     std::size_t capacity) {
  if (capacity == 0) throw ContractError("token_choice_forward: capacity must be >= 1");
  const auto scores = detail::group_scores(group, params);
  const std::size_t g = group.dim(0), d = group.dim(1), E = params.n_experts();
  const auto s = scores.data();
  const auto x = group.data();
  RoutingAssignment a;
  a.kind = RoutingKind::token_choice;
  a.group_size = g;
  a.n_experts = E;
  a.capacity = capacity;
  a.expert_for_token.resize(g);
  a.dropped.assign(g, false);
  std::vector<std::size_t> load(E, 0);
  Buffer<T> out(g * d, T(0));
  for (std::size_t i = 0; i < g; ++i) {
    const T* row = s.data() + i * E;
    std::size_t best = 0;
    for (std::size_t e = 1; e < E; ++e) {
      if (row[e] > row[best]) best = e;
    }
    a.expert_for_token[i] = best;
    if (load[best] >= capacity) {
      a.dropped[i] = true;
      continue;
    }
    ++load[best];
    T denom = T(0);
    for (std::size_t e = 0; e < E; ++e) denom += std::exp(row[e] - row[best]);
    const T gate = T(1) / denom;
    const auto y = detail::expert_ffn_loop(params, best, x.subspan(i * d, d));
    for (std::size_t c = 0; c < d; ++c) out[i * d + c] = gate * y[c];
  }
  return {Tensor<T>({g, d}, std::move(out)), std::move(a)};
}

struct LoadMetrics {
  double drop_fraction = 0.0;
  std::size_t max_load = 0;
  double load_entropy = 0.0;
};

/// Load is the number of tokens that selected (token choice) or were
/// selected by (expert choice) each expert, before capacity is applied.
inline LoadMetrics load_metrics(const RoutingAssignment& a) {
  std::vector<std::size_t> load(a.n_experts, 0);
  std::size_t dropped = 0;
  std::size_t total = 0;
  if (a.kind == RoutingKind::expert_choice) {
    for (std::size_t e = 0; e < a.token_for_expert.size(); ++e) ++load[e];
  } else {
    for (std::size_t i = 0; i < a.expert_for_token.size(); ++i) {
      ++load[a.expert_for_token[i]];
      if (a.dropped[i]) ++dropped;
    }
  }
  for (auto l : load) total += l;
  LoadMetrics m;
  m.drop_fraction = a.group_size ? static_cast<double>(dropped) / a.group_size : 0.0;
  m.max_load = load.empty() ? 0 : *std::max_element(load.begin(), load.end());
  for (auto l : load) {
    if (l == 0) continue;
    const double p = static_cast<double>(l) / total;
    m.load_entropy -= p * std::log(p);
  }
  return m;
}

/// Capacity used when a baseline replaces a feed-forward block: one token
/// per expert slot on average, at least one.
inline std::size_t default_capacity(std::size_t group_size, std::size_t n_experts) {
  return std::max<std::size_t>(1, (group_size + n_experts - 1) / n_experts);
}

/// Runs a baseline over every position-wise group of [B x T x d]. The result
/// is a constant tensor (no gradient path).
template <typename T>
Tensor<T> baseline_layer_forward(const Tensor<T>& batch, const MoTLayerParams<T>& params,
                                 const MoTConfig& cfg, RoutingKind kind) {
  NoGradGuard no_grad;
  const auto grouping = TokenGrouping::make(batch.dim(0), batch.dim(1), cfg.group_size);
  const std::size_t d = batch.dim(2), g = cfg.group_size;
  const auto groups = group_tokens(batch, grouping);
  Buffer<T> out(groups.numel());
  const std::size_t capacity = default_capacity(g, params.n_experts());
  for (std::size_t q = 0; q < grouping.n_groups(); ++q) {
    Buffer<T> slice(groups.data().begin() + q * g * d,
                         groups.data().begin() + (q + 1) * g * d);
    Tensor<T> group({g, d}, std::move(slice));
    auto routed = kind == RoutingKind::expert_choice
                      ? expert_choice_forward(group, params)
                      : token_choice_forward(group, params, capacity);
    std::copy(routed.output.data().begin(), routed.output.data().end(),
              out.begin() + q * g * d);
  }
  Tensor<T> grouped(groups.shape(), std::move(out));
  return ungroup_tokens(grouped, grouping);
}

}  // namespace mot
