#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mot/grad_check.hpp"
#include "mot/model.hpp"
#include "mot/mot_layer.hpp"
#include "mot/ops.hpp"
#include "mot/random.hpp"
#include "mot/tensor.hpp"

namespace mot {

struct GradCheckCase {
  std::string name;
  double max_rel_error = 0.0;
  double threshold = 0.0;
  bool passed = false;
};

template <typename T>
struct GradCheckTolerance {
  T eps;
  double threshold;
};

/// Step size and pass threshold per precision. Single precision finite
/// differences only catch gross errors.
template <typename T>
GradCheckTolerance<T> gradcheck_tolerance() {
  if constexpr (sizeof(T) >= 8) {
    return {T(1e-5), 1e-5};
  } else {
    return {T(3e-3), 5e-2};
  }
}

namespace detail {

// Scalarizes an output with fixed random weights so every coordinate gets a
// distinct upstream gradient.
template <typename T>
struct Projector {
  Tensor<T> weights;
  Tensor<T> operator()(const Tensor<T>& y) const { return sum(y * weights); }
};

template <typename T>
Projector<T> projector_for(const Shape& shape, Rng& rng) {
  return {random_normal<T>(shape, rng, 1.0)};
}

template <typename T>
Tensor<T> param(Shape shape, Rng& rng, double stddev = 1.0) {
  return random_normal<T>(std::move(shape), rng, stddev, true);
}

template <typename T>
Tensor<T> positive_param(Shape shape, Rng& rng, double lo, double hi) {
  return random_uniform<T>(std::move(shape), rng, lo, hi, true);
}

}  // namespace detail

/// Finite-difference checks for every differentiable op, the full MoT layer
/// (g=4, E=3, d=8, learnable temperature) and two tiny language models.
template <typename T>
std::vector<GradCheckCase> run_gradcheck_suite(std::uint64_t seed) {
  const auto tol = gradcheck_tolerance<T>();
  std::vector<GradCheckCase> results;
  std::uint64_t stream = 0;
  auto check = [&](const std::string& name,
                   const std::function<std::pair<std::function<Tensor<T>()>, std::vector<Tensor<T>>>(Rng&)>&
                       build) {
    Rng rng = make_rng(seed, 0x67726164ULL + stream++);
    auto [f, params] = build(rng);
    const auto r = grad_check<T>(f, params, tol.eps);
    results.push_back({name, r.max_rel_error, tol.threshold, r.max_rel_error < tol.threshold});
  };
  using Built = std::pair<std::function<Tensor<T>()>, std::vector<Tensor<T>>>;

  for (bool ta : {false, true})
    for (bool tb : {false, true}) {
      check(std::string("bmm") + (ta ? "_ta" : "") + (tb ? "_tb" : ""), [=](Rng& rng) -> Built {
        auto a = detail::param<T>(ta ? Shape{2, 4, 3} : Shape{2, 3, 4}, rng);
        auto b = detail::param<T>(tb ? Shape{2, 5, 4} : Shape{2, 4, 5}, rng);
        auto proj = detail::projector_for<T>({2, 3, 5}, rng);
        return {[=] { return proj(bmm(a, b, ta, tb)); }, {a, b}};
      });
    }
  check("matmul", [](Rng& rng) -> Built {
    auto a = detail::param<T>({3, 4}, rng);
    auto b = detail::param<T>({4, 2}, rng);
    auto proj = detail::projector_for<T>({3, 2}, rng);
    return {[=] { return proj(matmul(a, b)); }, {a, b}};
  });
  for (auto op : {BinaryOp::add, BinaryOp::sub, BinaryOp::mul}) {
    const char* names[] = {"add", "sub", "mul"};
    check(std::string("elementwise_") + names[static_cast<int>(op)], [=](Rng& rng) -> Built {
      auto a = detail::param<T>({3, 4}, rng);
      auto b = detail::param<T>({3, 4}, rng);
      auto proj = detail::projector_for<T>({3, 4}, rng);
      return {[=] { return proj(elementwise(a, b, op)); }, {a, b}};
    });
    check(std::string("elementwise_") + names[static_cast<int>(op)] + "_scalar", [=](Rng& rng) -> Built {
      auto a = detail::param<T>({3, 4}, rng);
      auto b = detail::param<T>({1}, rng);
      auto proj = detail::projector_for<T>({3, 4}, rng);
      return {[=] { return proj(elementwise(a, b, op)); }, {a, b}};
    });
  }
  check("fan_out", [](Rng& rng) -> Built {
    auto a = detail::param<T>({5}, rng);
    auto proj = detail::projector_for<T>({5}, rng);
    return {[=] { return proj(a * a + a); }, {a}};
  });
  check("scale", [](Rng& rng) -> Built {
    auto a = detail::param<T>({2, 3}, rng);
    auto proj = detail::projector_for<T>({2, 3}, rng);
    return {[=] { return proj(scale(a, T(-1.7))); }, {a}};
  });
  check("add_scalar", [](Rng& rng) -> Built {
    auto a = detail::param<T>({2, 3}, rng);
    auto proj = detail::projector_for<T>({2, 3}, rng);
    return {[=] { return proj(add_scalar(a, T(0.3))); }, {a}};
  });
  check("exp", [](Rng& rng) -> Built {
    auto a = detail::param<T>({2, 3}, rng, 0.5);
    auto proj = detail::projector_for<T>({2, 3}, rng);
    return {[=] { return proj(exp(a)); }, {a}};
  });
  check("activation", [](Rng& rng) -> Built {
    auto a = detail::param<T>({4, 5}, rng, 2.0);
    auto proj = detail::projector_for<T>({4, 5}, rng);
    return {[=] { return proj(activation(a)); }, {a}};
  });
  check("sum", [](Rng& rng) -> Built {
    auto a = detail::param<T>({3, 3}, rng);
    return {[=] { return scale(sum(a), T(1.3)); }, {a}};
  });
  check("mean", [](Rng& rng) -> Built {
    auto a = detail::param<T>({3, 3}, rng);
    return {[=] { auto m = mean(a); return m * m; }, {a}};
  });
  check("reshape", [](Rng& rng) -> Built {
    auto a = detail::param<T>({2, 6}, rng);
    auto proj = detail::projector_for<T>({3, 4}, rng);
    return {[=] { return proj(reshape(a, {3, 4})); }, {a}};
  });
  for (std::array<std::size_t, 3> perm :
       {std::array<std::size_t, 3>{0, 2, 1}, {1, 0, 2}, {2, 1, 0}, {1, 2, 0}}) {
    check("permute3_" + std::to_string(perm[0]) + std::to_string(perm[1]) + std::to_string(perm[2]),
          [=](Rng& rng) -> Built {
            const Shape in{2, 3, 4};
            auto a = detail::param<T>(in, rng);
            auto proj = detail::projector_for<T>({in[perm[0]], in[perm[1]], in[perm[2]]}, rng);
            return {[=] { return proj(permute3(a, perm)); }, {a}};
          });
  }
  check("gather_rows", [](Rng& rng) -> Built {
    auto a = detail::param<T>({4, 3}, rng);
    auto proj = detail::projector_for<T>({5, 3}, rng);
    const std::vector<std::size_t> idx{2, 0, 2, 3, 1};
    return {[=] { return proj(gather_rows(a, std::span<const std::size_t>(idx))); }, {a}};
  });
  check("embedding_lookup", [](Rng& rng) -> Built {
    auto table = detail::param<T>({6, 3}, rng);
    auto proj = detail::projector_for<T>({4, 3}, rng);
    const std::vector<std::int32_t> ids{5, 1, 5, 0};
    return {[=] { return proj(embedding_lookup(table, std::span<const std::int32_t>(ids))); }, {table}};
  });
  check("linear", [](Rng& rng) -> Built {
    auto x = detail::param<T>({2, 3, 4}, rng);
    auto w = detail::param<T>({4, 5}, rng);
    auto b = detail::param<T>({5}, rng);
    auto proj = detail::projector_for<T>({2, 3, 5}, rng);
    return {[=] { return proj(linear(x, w, b)); }, {x, w, b}};
  });
  check("add_bias_row", [](Rng& rng) -> Built {
    auto x = detail::param<T>({3, 4}, rng);
    auto b = detail::param<T>({4}, rng);
    auto proj = detail::projector_for<T>({3, 4}, rng);
    return {[=] { return proj(add_bias(x, b)); }, {x, b}};
  });
  check("add_bias_batched", [](Rng& rng) -> Built {
    auto x = detail::param<T>({2, 3, 4}, rng);
    auto b = detail::param<T>({2, 4}, rng);
    auto proj = detail::projector_for<T>({2, 3, 4}, rng);
    return {[=] { return proj(add_bias(x, b)); }, {x, b}};
  });
  for (std::size_t dim : {0, 1, 2}) {
    check("softmax_dim" + std::to_string(dim), [=](Rng& rng) -> Built {
      auto x = detail::param<T>({2, 3, 4}, rng);
      auto proj = detail::projector_for<T>({2, 3, 4}, rng);
      return {[=] { return proj(softmax_dim(x, dim, T(0.7))); }, {x}};
    });
  }
  check("softmax_temperature", [](Rng& rng) -> Built {
    auto x = detail::param<T>({3, 5}, rng);
    auto tau = detail::positive_param<T>({1}, rng, 0.5, 1.5);
    auto proj = detail::projector_for<T>({3, 5}, rng);
    return {[=] { return proj(softmax_dim(x, 1, tau)); }, {x, tau}};
  });
  check("layer_norm", [](Rng& rng) -> Built {
    auto x = detail::param<T>({3, 6}, rng);
    auto gain = detail::param<T>({6}, rng);
    auto bias = detail::param<T>({6}, rng);
    auto proj = detail::projector_for<T>({3, 6}, rng);
    return {[=] { return proj(layer_norm(x, gain, bias)); }, {x, gain, bias}};
  });
  check("cross_entropy", [](Rng& rng) -> Built {
    auto logits = detail::param<T>({4, 5}, rng);
    const std::vector<std::int32_t> targets{0, 3, 3, 4};
    return {[=] { return cross_entropy(logits, std::span<const std::int32_t>(targets)); }, {logits}};
  });
  check("softmax_cross_entropy", [](Rng& rng) -> Built {
    auto x = detail::param<T>({3, 4}, rng);
    auto w = detail::param<T>({4, 4}, rng);
    auto tau = detail::positive_param<T>({1}, rng, 0.5, 1.5);
    const std::vector<std::int32_t> targets{1, 0, 2};
    return {[=] {
              auto p = softmax_dim(matmul(x, w), 1, tau);
              return cross_entropy(matmul(p, w), std::span<const std::int32_t>(targets));
            },
            {x, w, tau}};
  });
  check("causal_attention_core", [](Rng& rng) -> Built {
    auto q = detail::param<T>({2, 4, 6}, rng);
    auto k = detail::param<T>({2, 4, 6}, rng);
    auto v = detail::param<T>({2, 4, 6}, rng);
    auto proj = detail::projector_for<T>({2, 4, 6}, rng);
    return {[=] { return proj(causal_attention_core(q, k, v, 2)); }, {q, k, v}};
  });

  for (auto mode : {TemperatureMode::learnable, TemperatureMode::fixed}) {
    check("mot_layer_" + to_string(mode), [=](Rng& rng) -> Built {
      MoTConfig cfg;
      cfg.n_experts = 3;
      cfg.expert_hidden = 5;
      cfg.group_size = 4;
      cfg.temperature_mode = mode;
      cfg.init_temperature = 0.8;
      auto p = MoTLayerParams<T>::init(8, cfg, rng);
      // Larger weights than the training init, so every term is exercised.
      for (auto& [_, t] : p.named("")) {
        auto data = t.mutable_data();
        for (auto& v : data) v = static_cast<T>(v * T(25) + T(0.05));
      }
      if (p.log_temperature.defined()) p.log_temperature.mutable_data()[0] = static_cast<T>(std::log(0.8));
      auto x = detail::param<T>({4, 2, 8}, rng);
      auto proj = detail::projector_for<T>({4, 2, 8}, rng);
      std::vector<Tensor<T>> params{x};
      for (auto& [_, t] : p.named("")) params.push_back(t);
      return {[=] { return proj(mot_layer_forward(x, p, cfg).output); }, params};
    });
  }

  for (auto kind : {FeedForwardKind::dense, FeedForwardKind::mot}) {
    check("tiny_lm_" + to_string(kind), [=](Rng& rng) -> Built {
      ModelConfig mc;
      mc.n_blocks = 1;
      mc.d_model = 8;
      mc.d_ff = 12;
      mc.n_heads = 2;
      mc.vocab_size = 11;
      mc.context_length = 4;
      mc.ff_kind = kind;
      std::optional<MoTConfig> mot;
      if (kind == FeedForwardKind::mot) {
        mot = MoTConfig{3, 4, 2, TemperatureMode::learnable, 1.0};
      }
      auto model = std::make_shared<Model<T>>(mc, mot, rng());
      for (auto& [_, t] : model->parameters()) {
        auto handle = t;
        for (auto& v : handle.mutable_data()) v = static_cast<T>(v * T(5));
      }
      std::uniform_int_distribution<int> tok(0, 10);
      std::vector<std::int32_t> ids(4 * 3), targets(4 * 3);
      for (auto& i : ids) i = tok(rng);
      for (auto& i : targets) i = tok(rng);
      std::vector<Tensor<T>> params;
      for (auto& [_, t] : model->parameters()) params.push_back(t);
      return {[=] {
                return cross_entropy(model->forward(ids, 4, 3), std::span<const std::int32_t>(targets));
              },
              params};
    });
  }
  return results;
}

}  // namespace mot
