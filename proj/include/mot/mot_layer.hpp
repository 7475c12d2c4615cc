#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mot/ops.hpp"
#include "mot/random.hpp"
#include "mot/tensor.hpp"

namespace mot {

enum class TemperatureMode { fixed, learnable, hard };

inline std::string to_string(TemperatureMode mode) {
  switch (mode) {
    case TemperatureMode::fixed: return "fixed";
    case TemperatureMode::learnable: return "learnable";
    case TemperatureMode::hard: return "hard";
  }
  return "fixed";
}

inline TemperatureMode parse_temperature_mode(const std::string& s) {
  if (s == "fixed") return TemperatureMode::fixed;
  if (s == "learnable") return TemperatureMode::learnable;
  if (s == "hard") return TemperatureMode::hard;
  throw ConfigError("temperature_mode: expected fixed|learnable|hard, got '" +
                    s + "'");
}

struct MoTConfig {
  std::size_t n_experts = 32;
  std::size_t expert_hidden = 64;
  std::size_t group_size = 8;
  TemperatureMode temperature_mode = TemperatureMode::fixed;
  // Fixed mode uses this value directly; learnable mode starts from it.
  double init_temperature = 1.0;

  void validate() const {
    if (n_experts == 0 || expert_hidden == 0 || group_size == 0) {
      throw ConfigError("mot: n_experts, expert_hidden and group_size must be positive");
    }
    if (!(init_temperature > 0.0) || !std::isfinite(init_temperature)) {
      throw ConfigError("mot: init_temperature must be positive");
    }
  }
};

template <typename T>
struct MoTLayerParams {
  Tensor<T> controller;       // [d x E]
  Tensor<T> controller_bias;  // [E]
  Tensor<T> expert_w1;        // [E x d x h]
  Tensor<T> expert_b1;        // [E x h]
  Tensor<T> expert_w2;        // [E x h x d]
  Tensor<T> expert_b2;        // [E x d]
  Tensor<T> log_temperature;  // [1], defined only in learnable mode

  std::size_t d_model() const { return controller.dim(0); }
  std::size_t n_experts() const { return controller.dim(1); }
  std::size_t expert_hidden() const { return expert_w1.dim(2); }

  /// normal(0, 0.02) weights, zero biases; expert_w2 additionally scaled by
  /// residual_scale.
  static MoTLayerParams init(std::size_t d_model, const MoTConfig& cfg, Rng& rng,
                             double residual_scale = 1.0) {
    cfg.validate();
    const std::size_t E = cfg.n_experts, h = cfg.expert_hidden;
    MoTLayerParams p;
    p.controller = random_normal<T>({d_model, E}, rng, 0.02, true);
    p.controller_bias = Tensor<T>::zeros({E}, true);
    p.expert_w1 = random_normal<T>({E, d_model, h}, rng, 0.02, true);
    p.expert_b1 = Tensor<T>::zeros({E, h}, true);
    p.expert_w2 = random_normal<T>({E, h, d_model}, rng, 0.02 * residual_scale, true);
    p.expert_b2 = Tensor<T>::zeros({E, d_model}, true);
    if (cfg.temperature_mode == TemperatureMode::learnable) {
      p.log_temperature =
          Tensor<T>::scalar(static_cast<T>(std::log(cfg.init_temperature)), true);
    }
    return p;
  }

  std::vector<std::pair<std::string, Tensor<T>>> named(const std::string& prefix) const {
    std::vector<std::pair<std::string, Tensor<T>>> out{
        {prefix + "controller", controller},
        {prefix + "controller_bias", controller_bias},
        {prefix + "expert_b1", expert_b1},
        {prefix + "expert_b2", expert_b2},
        {prefix + "expert_w1", expert_w1},
        {prefix + "expert_w2", expert_w2},
    };
    if (log_temperature.defined()) out.emplace_back(prefix + "log_temperature", log_temperature);
    return out;
  }
};

/// Position-wise grouping across sequences. Group index is
/// t * (B / g) + j for position t and batch slice j; member i of that group
/// is sequence j * g + i.
struct TokenGrouping {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::size_t group_size = 0;
  std::vector<std::size_t> grouped_to_source;  // grouped row -> b * T + t
  std::vector<std::size_t> source_to_grouped;

  std::size_t slices() const { return batch / group_size; }
  std::size_t n_groups() const { return length * slices(); }

  static TokenGrouping make(std::size_t batch, std::size_t length,
                            std::size_t group_size) {
    if (group_size == 0 || batch % group_size != 0) {
      throw ConfigError("group_size " + std::to_string(group_size) +
                        " must divide batch size " + std::to_string(batch));
    }
    TokenGrouping g{batch, length, group_size, {}, {}};
    g.grouped_to_source.resize(batch * length);
    g.source_to_grouped.resize(batch * length);
    std::size_t row = 0;
    for (std::size_t t = 0; t < length; ++t)
      for (std::size_t j = 0; j < g.slices(); ++j)
        for (std::size_t i = 0; i < group_size; ++i) {
          const std::size_t src = (j * group_size + i) * length + t;
          g.grouped_to_source[row] = src;
          g.source_to_grouped[src] = row;
          ++row;
        }
    return g;
  }

  std::size_t group_of(std::size_t b, std::size_t t) const {
    return source_to_grouped[b * length + t] / group_size;
  }
};

template <typename T>
Tensor<T> group_tokens(const Tensor<T>& batch, const TokenGrouping& grouping) {
  detail::require_rank(batch.shape(), 3, "group_tokens");
  if (batch.dim(0) != grouping.batch || batch.dim(1) != grouping.length) {
    throw DimensionError("group_tokens: batch " + batch.shape_string() +
                         " does not match grouping");
  }
  const std::size_t d = batch.dim(2);
  auto rows = reshape(batch, {grouping.batch * grouping.length, d});
  auto gathered = gather_rows(rows, std::span<const std::size_t>(grouping.grouped_to_source));
  return reshape(gathered, {grouping.n_groups(), grouping.group_size, d});
}

template <typename T>
Tensor<T> ungroup_tokens(const Tensor<T>& groups, const TokenGrouping& grouping) {
  const std::size_t d = groups.shape().back();
  auto rows = reshape(groups, {grouping.batch * grouping.length, d});
  auto gathered = gather_rows(rows, std::span<const std::size_t>(grouping.source_to_grouped));
  return reshape(gathered, {grouping.batch, grouping.length, d});
}

/// Controller logits per token: [G x g x d] -> [G x g x E]. No normalization.
template <typename T>
Tensor<T> controller_scores(const Tensor<T>& groups, const MoTLayerParams<T>& params) {
  return linear(groups, params.controller, params.controller_bias);
}

/// Per-expert distribution over the tokens of each group, [G x E x g].
template <typename T>
struct MixingWeights {
  Tensor<T> w;
  bool hard = false;

  std::size_t n_groups() const { return w.dim(0); }
  std::size_t n_experts() const { return w.dim(1); }
  std::size_t group_size() const { return w.dim(2); }
};

template <typename T>
MixingWeights<T> mixing_weights(const Tensor<T>& scores, T temperature) {
  detail::require_rank(scores.shape(), 3, "mixing_weights");
  return {softmax_dim(permute3(scores, {0, 2, 1}), 2, temperature), false};
}

template <typename T>
MixingWeights<T> mixing_weights(const Tensor<T>& scores, const Tensor<T>& temperature) {
  detail::require_rank(scores.shape(), 3, "mixing_weights");
  return {softmax_dim(permute3(scores, {0, 2, 1}), 2, temperature), false};
}

/// One-hot at each expert's highest-scoring token; ties go to the lowest
/// index. Constant: no gradient reaches the controller.
template <typename T>
MixingWeights<T> hard_mixing_weights(const Tensor<T>& scores) {
  detail::require_rank(scores.shape(), 3, "hard_mixing_weights");
  const std::size_t G = scores.dim(0), g = scores.dim(1), E = scores.dim(2);
  const auto s = scores.data();
  Buffer<T> data(G * E * g, T(0));
  for (std::size_t q = 0; q < G; ++q)
    for (std::size_t e = 0; e < E; ++e) {
      std::size_t best = 0;
      for (std::size_t i = 1; i < g; ++i) {
        if (s[(q * g + i) * E + e] > s[(q * g + best) * E + e]) best = i;
      }
      data[(q * E + e) * g + best] = T(1);
    }
  return {Tensor<T>({G, E, g}, std::move(data)), true};
}

template <typename T>
Tensor<T> temperature_tensor(const MoTLayerParams<T>& params, const MoTConfig& cfg) {
  if (cfg.temperature_mode == TemperatureMode::learnable) {
    return exp(params.log_temperature);
  }
  return Tensor<T>::scalar(static_cast<T>(cfg.init_temperature));
}

template <typename T>
double current_temperature(const MoTLayerParams<T>& params, const MoTConfig& cfg) {
  if (cfg.temperature_mode == TemperatureMode::learnable) {
    return std::exp(static_cast<double>(params.log_temperature.item()));
  }
  if (cfg.temperature_mode == TemperatureMode::hard) return 0.0;
  return cfg.init_temperature;
}

template <typename T>
MixingWeights<T> mixing_weights(const Tensor<T>& scores, const MoTLayerParams<T>& params,
                                const MoTConfig& cfg) {
  switch (cfg.temperature_mode) {
    case TemperatureMode::hard: return hard_mixing_weights(scores);
    case TemperatureMode::learnable: return mixing_weights(scores, exp(params.log_temperature));
    case TemperatureMode::fixed: break;
  }
  return mixing_weights(scores, static_cast<T>(cfg.init_temperature));
}

/// mixed[q, e] = sum_i w[q, e, i] * token[q, i].
template <typename T>
Tensor<T> mix(const Tensor<T>& groups, const MixingWeights<T>& weights) {
  return bmm(weights.w, groups);
}

/// Each expert's two-layer FFN on its own mixture: [G x E x d] -> [G x E x d].
template <typename T>
Tensor<T> expert_forward(const Tensor<T>& mixed, const MoTLayerParams<T>& params) {
  auto by_expert = permute3(mixed, {1, 0, 2});  // [E x G x d]
  auto hidden = activation(add_bias(bmm(by_expert, params.expert_w1), params.expert_b1));
  auto out = add_bias(bmm(hidden, params.expert_w2), params.expert_b2);
  return permute3(out, {1, 0, 2});
}

/// out[q, i] = sum_e w[q, e, i] * expert_out[q, e], with the mixing weights.
template <typename T>
Tensor<T> redistribute(const Tensor<T>& expert_out, const MixingWeights<T>& weights) {
  return bmm(weights.w, expert_out, /*trans_a=*/true);
}

template <typename T>
struct MoTOutput {
  Tensor<T> output;  // [B x T x d], to be added to the residual stream
  MixingWeights<T> weights;
};

template <typename T>
MoTOutput<T> mot_layer_forward(const Tensor<T>& batch, const MoTLayerParams<T>& params,
                               const MoTConfig& cfg) {
  detail::require_rank(batch.shape(), 3, "mot_layer_forward");
  const auto grouping = TokenGrouping::make(batch.dim(0), batch.dim(1), cfg.group_size);
  auto groups = group_tokens(batch, grouping);
  auto scores = controller_scores(groups, params);
  auto weights = mixing_weights(scores, params, cfg);
  auto expert_out = expert_forward(mix(groups, weights), params);
  auto out = redistribute(expert_out, weights);
  return {ungroup_tokens(out, grouping), std::move(weights)};
}

}  // namespace mot
