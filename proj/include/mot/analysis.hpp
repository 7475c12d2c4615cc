#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "mot/baselines.hpp"
#include "mot/model.hpp"
#include "mot/mot_layer.hpp"
#include "mot/tensor.hpp"

namespace mot::analysis {

// FLOP convention: one multiply-add counts as 2 FLOPs. Biases, activations,
// norms, attention and the O(E * g * d) mixing sums are excluded.

inline std::uint64_t flops_ff_per_token(std::uint64_t d_model, std::uint64_t d_ff) {
  if (!d_model || !d_ff) throw ConfigError("flops_ff_per_token: dimensions must be positive");
  return 2 * (d_model * d_ff + d_ff * d_model);
}

struct MoTFlops {
  std::uint64_t expert = 0;
  std::uint64_t controller = 0;
};

/// Each expert runs once per group, so its cost is shared by group_size
/// tokens. The controller scores every token once.
inline MoTFlops flops_mot_per_token(std::uint64_t d_model, std::uint64_t n_experts,
                                    std::uint64_t expert_hidden, std::uint64_t group_size) {
  if (!d_model || !n_experts || !expert_hidden || !group_size) {
    throw ConfigError("flops_mot_per_token: dimensions must be positive");
  }
  const std::uint64_t per_group = 2 * n_experts * (d_model * expert_hidden * 2);
  if (per_group % group_size != 0) {
    throw ConfigError("flops_mot_per_token: per-group expert cost " + std::to_string(per_group) +
                      " not divisible by group_size " + std::to_string(group_size));
  }
  return {per_group / group_size, 2 * d_model * n_experts};
}

/// expert_hidden such that n_experts * expert_hidden == expansion * d_ff.
inline std::size_t derive_expert_hidden(std::size_t d_ff, std::size_t expansion,
                                        std::size_t n_experts) {
  if (!n_experts || (expansion * d_ff) % n_experts != 0) {
    throw ConfigError("cannot split " + std::to_string(expansion) + " x d_ff " +
                      std::to_string(d_ff) + " evenly across " + std::to_string(n_experts) +
                      " experts");
  }
  return expansion * d_ff / n_experts;
}

inline std::uint64_t params_ff_layer(std::uint64_t d_model, std::uint64_t d_ff) {
  return 2 * d_model * d_ff + d_ff + d_model;
}

inline std::uint64_t params_mot_layer(std::uint64_t d_model, const MoTConfig& cfg) {
  const std::uint64_t E = cfg.n_experts, h = cfg.expert_hidden;
  std::uint64_t n = d_model * E + E;              // controller
  n += E * (d_model * h + h) + E * (h * d_model + d_model);  // experts
  if (cfg.temperature_mode == TemperatureMode::learnable) n += 1;
  return n;
}

struct CostReport {
  std::uint64_t params_ff_layer = 0;
  std::uint64_t flops_per_token_ff = 0;
  std::uint64_t params_mot_layer = 0;
  std::uint64_t flops_per_token_mot_expert = 0;
  std::uint64_t flops_per_token_mot_controller = 0;
  double expansion_ratio = 0.0;
};

inline CostReport make_cost_report(std::size_t d_model, std::size_t d_ff, const MoTConfig& mot) {
  CostReport r;
  r.params_ff_layer = params_ff_layer(d_model, d_ff);
  r.flops_per_token_ff = flops_ff_per_token(d_model, d_ff);
  r.params_mot_layer = params_mot_layer(d_model, mot);
  const auto f = flops_mot_per_token(d_model, mot.n_experts, mot.expert_hidden, mot.group_size);
  r.flops_per_token_mot_expert = f.expert;
  r.flops_per_token_mot_controller = f.controller;
  r.expansion_ratio = static_cast<double>(r.params_mot_layer) / r.params_ff_layer;
  return r;
}

inline void write_cost_report(std::ostream& os, const CostReport& r) {
  os << "convention=multiply_add_is_2_flops;biases_activations_norms_attention_mixing_excluded\n"
     << "params_ff_layer=" << r.params_ff_layer << '\n'
     << "flops_per_token_ff=" << r.flops_per_token_ff << '\n'
     << "params_mot_layer=" << r.params_mot_layer << '\n'
     << "flops_per_token_mot_expert=" << r.flops_per_token_mot_expert << '\n'
     << "flops_per_token_mot_controller=" << r.flops_per_token_mot_controller << '\n'
     << "flops_per_token_mot_total="
     << r.flops_per_token_mot_expert + r.flops_per_token_mot_controller << '\n'
     << "expansion_ratio=" << r.expansion_ratio << '\n'
     << "expert_flop_parity="
     << (r.flops_per_token_mot_expert == r.flops_per_token_ff ? "true" : "false") << '\n';
}

/// Mean over groups and experts of -sum_i w ln w, with 0 ln 0 = 0.
template <typename T>
double mixing_entropy(const MixingWeights<T>& weights) {
  const std::size_t rows = weights.n_groups() * weights.n_experts();
  const std::size_t g = weights.group_size();
  const auto w = weights.w.data();
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    double h = 0.0;
    for (std::size_t i = 0; i < g; ++i) {
      const double p = w[r * g + i];
      if (p > 0.0) h -= p * std::log(p);
    }
    total += h;
  }
  return total / static_cast<double>(rows);
}

enum class LeakMode { causal, same_sequence, cross_sequence };

inline std::string to_string(LeakMode m) {
  switch (m) {
    case LeakMode::causal: return "causal";
    case LeakMode::same_sequence: return "same_sequence";
    case LeakMode::cross_sequence: return "cross_sequence";
  }
  return "causal";
}

/// Output is read at (probe_seq, probe_pos) after perturbing the input at
/// (perturb_seq, perturb_pos).
struct LeakProbe {
  std::size_t probe_seq = 0;
  std::size_t probe_pos = 0;
  std::size_t perturb_seq = 0;
  std::size_t perturb_pos = 0;
};

inline void validate_probe(const LeakProbe& p, LeakMode mode, std::size_t batch,
                           std::size_t length) {
  if (p.probe_seq >= batch || p.perturb_seq >= batch || p.probe_pos >= length ||
      p.perturb_pos >= length) {
    throw IndexError("leak_check: probe outside the batch");
  }
  switch (mode) {
    case LeakMode::causal:
      if (p.perturb_seq != p.probe_seq || p.perturb_pos <= p.probe_pos) {
        throw ContractError("leak_check(causal): perturb a later position of the same sequence");
      }
      break;
    case LeakMode::same_sequence:
      if (p.perturb_seq != p.probe_seq || p.perturb_pos == p.probe_pos) {
        throw ContractError("leak_check(same_sequence): perturb another position of the same sequence");
      }
      break;
    case LeakMode::cross_sequence:
      if (p.perturb_seq == p.probe_seq) {
        throw ContractError("leak_check(cross_sequence): perturb a different sequence");
      }
      break;
  }
}

namespace detail {

template <typename T>
double max_abs_row_diff(const Tensor<T>& a, const Tensor<T>& b, std::size_t row,
                        std::size_t width) {
  double m = 0.0;
  for (std::size_t c = 0; c < width; ++c) {
    m = std::max(m, std::abs(static_cast<double>(a.data()[row * width + c]) -
                             static_cast<double>(b.data()[row * width + c])));
  }
  return m;
}

}  // namespace detail

/// Replaces one token id and reports the largest logit change at the probe.
template <typename T>
double leak_check(Model<T>& model, std::span<const std::int32_t> ids, std::size_t batch,
                  std::size_t length, const LeakProbe& probe, LeakMode mode) {
  validate_probe(probe, mode, batch, length);
  NoGradGuard no_grad;
  const auto base = model.forward(ids, batch, length);
  std::vector<std::int32_t> changed(ids.begin(), ids.end());
  const auto V = static_cast<std::int32_t>(model.config().vocab_size);
  auto& id = changed[probe.perturb_seq * length + probe.perturb_pos];
  id = (id + 1 + V / 2) % V;
  const auto moved = model.forward(changed, batch, length);
  return detail::max_abs_row_diff(base, moved, probe.probe_seq * length + probe.probe_pos, V);
}

/// Shifts one input vector of an isolated MoT layer and reports the largest
/// output change at the probe.
template <typename T>
double leak_check(const MoTLayerParams<T>& params, const MoTConfig& cfg, const Tensor<T>& input,
                  const LeakProbe& probe, LeakMode mode) {
  const std::size_t batch = input.dim(0), length = input.dim(1), d = input.dim(2);
  validate_probe(probe, mode, batch, length);
  NoGradGuard no_grad;
  const auto base = mot_layer_forward(input, params, cfg).output;
  auto shifted = input.clone();
  auto data = shifted.mutable_data();
  const std::size_t row = probe.perturb_seq * length + probe.perturb_pos;
  for (std::size_t c = 0; c < d; ++c) data[row * d + c] += T(1) + T(0.1) * static_cast<T>(c);
  const auto moved = mot_layer_forward(shifted, params, cfg).output;
  return detail::max_abs_row_diff(base, moved, probe.probe_seq * length + probe.probe_pos, d);
}

/// Largest elementwise gap between MoT (hard, or soft at `temperature`) and
/// Expert Choice over groups [G x g x d] with shared parameters.
template <typename T>
double equivalence_check(const MoTLayerParams<T>& params, const Tensor<T>& groups,
                         std::optional<T> temperature = std::nullopt) {
  NoGradGuard no_grad;
  const auto scores = controller_scores(groups, params);
  const auto weights = temperature ? mixing_weights(scores, *temperature) : hard_mixing_weights(scores);
  const auto mot_out = redistribute(expert_forward(mix(groups, weights), params), weights);
  const std::size_t G = groups.dim(0), g = groups.dim(1), d = groups.dim(2);
  double worst = 0.0;
  for (std::size_t q = 0; q < G; ++q) {
    Buffer<T> slice(groups.data().begin() + q * g * d, groups.data().begin() + (q + 1) * g * d);
    const auto ec = expert_choice_forward(Tensor<T>({g, d}, std::move(slice)), params);
    for (std::size_t i = 0; i < g * d; ++i) {
      worst = std::max(worst, std::abs(static_cast<double>(mot_out.data()[q * g * d + i]) -
                                       static_cast<double>(ec.output.data()[i])));
    }
  }
  return worst;
}

}  // namespace mot::analysis
