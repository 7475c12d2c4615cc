#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "mot/tensor.hpp"

namespace mot {

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed),
                    static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream),
                    static_cast<std::uint32_t>(stream >> 32)};
  return Rng(seq);
}

template <typename T>
Tensor<T> random_normal(Shape shape, Rng& rng, double stddev,
                        bool requires_grad = false) {
  std::normal_distribution<double> dist(0.0, stddev);
  Buffer<T> data(shape_numel(shape));
  for (auto& v : data) v = static_cast<T>(dist(rng));
  return Tensor<T>(std::move(shape), std::move(data), requires_grad);
}

template <typename T>
Tensor<T> random_uniform(Shape shape, Rng& rng, double lo, double hi,
                         bool requires_grad = false) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Buffer<T> data(shape_numel(shape));
  for (auto& v : data) v = static_cast<T>(dist(rng));
  return Tensor<T>(std::move(shape), std::move(data), requires_grad);
}

}  // namespace mot
