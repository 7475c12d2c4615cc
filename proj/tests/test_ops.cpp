#include <gtest/gtest.h>

#include <span>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "mot/ops.hpp"
#include "mot/random.hpp"

using mot::Tensor;
using T64 = Tensor<double>;

namespace {

std::vector<double> loop_matmul(std::span<const double> a, std::span<const double> b,
                                std::size_t m, std::size_t k, std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) c[i * n + j] += a[i * k + p] * b[p * n + j];
  return c;
}

std::vector<double> transpose(std::span<const double> a, std::size_t r, std::size_t c) {
  std::vector<double> t(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) t[j * r + i] = a[i * c + j];
  return t;
}

double gelu_reference(double x) {
  return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / std::numbers::pi) * (x + 0.044715 * x * x * x)));
}

}  // namespace

TEST(Matmul, IdentityLeavesInputUnchanged) {
  T64 eye({2, 2}, {1, 0, 0, 1});
  T64 x({2, 3}, {1, 2, 3, 4, 5, 6});
  auto y = mot::matmul(eye, x);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(y.data()[i], x.data()[i]);
}

TEST(Matmul, OneByOne) {
  EXPECT_EQ(mot::matmul(T64({1, 1}, {2}), T64({1, 1}, {3})).item(), 6.0);
}

TEST(Matmul, MatchesTripleLoop) {
  auto rng = mot::make_rng(11);
  auto a = mot::random_normal<double>({2, 3}, rng, 1.0);
  auto b = mot::random_normal<double>({3, 2}, rng, 1.0);
  auto ref = loop_matmul(a.values(), b.values(), 2, 3, 2);
  auto c = mot::matmul(a, b);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(c.data()[i], ref[i], 1e-12);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    mot::matmul(T64::zeros({2, 3}), T64::zeros({2, 3}));
    FAIL();
  } catch (const mot::DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3] and [2x3]"), std::string::npos) << msg;
  }
}

TEST(Matmul, GradientRules) {
  auto rng = mot::make_rng(12);
  auto a = mot::random_normal<double>({2, 3}, rng, 1.0, true);
  auto b = mot::random_normal<double>({3, 4}, rng, 1.0, true);
  auto g = mot::random_normal<double>({2, 4}, rng, 1.0);
  mot::backward(mot::sum(mot::matmul(a, b) * g));
  // dA = G * B^T, dB = A^T * G
  auto da = loop_matmul(g.values(), transpose(b.values(), 3, 4), 2, 4, 3);
  auto db = loop_matmul(transpose(a.values(), 2, 3), g.values(), 3, 2, 4);
  for (std::size_t i = 0; i < da.size(); ++i) EXPECT_NEAR(a.grad()[i], da[i], 1e-12);
  for (std::size_t i = 0; i < db.size(); ++i) EXPECT_NEAR(b.grad()[i], db[i], 1e-12);
}

TEST(Bmm, AllTransposeCombinationsMatchLoops) {
  auto rng = mot::make_rng(13);
  const std::size_t P = 3, m = 2, k = 4, n = 5;
  for (bool ta : {false, true})
    for (bool tb : {false, true}) {
      auto a = mot::random_normal<double>(ta ? mot::Shape{P, k, m} : mot::Shape{P, m, k}, rng, 1.0);
      auto b = mot::random_normal<double>(tb ? mot::Shape{P, n, k} : mot::Shape{P, k, n}, rng, 1.0);
      auto c = mot::bmm(a, b, ta, tb);
      ASSERT_EQ(c.shape(), (mot::Shape{P, m, n}));
      for (std::size_t p = 0; p < P; ++p) {
        std::vector<double> ap(a.data().begin() + p * m * k, a.data().begin() + (p + 1) * m * k);
        std::vector<double> bp(b.data().begin() + p * k * n, b.data().begin() + (p + 1) * k * n);
        if (ta) ap = transpose(ap, k, m);
        if (tb) bp = transpose(bp, n, k);
        auto ref = loop_matmul(ap, bp, m, k, n);
        for (std::size_t i = 0; i < m * n; ++i) EXPECT_NEAR(c.data()[p * m * n + i], ref[i], 1e-12);
      }
    }
}

TEST(Bmm, BatchMismatchRejected) {
  EXPECT_THROW(mot::bmm(T64::zeros({2, 2, 2}), T64::zeros({3, 2, 2})), mot::DimensionError);
}

TEST(Elementwise, Identities) {
  T64 x({3}, {1.5, -2, 4});
  auto plus0 = x + T64::scalar(0.0);
  auto times1 = x * T64::scalar(1.0);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(plus0.data()[i], x.data()[i]);
    EXPECT_EQ(times1.data()[i], x.data()[i]);
  }
}

TEST(Elementwise, MulAndSub) {
  auto p = T64({2}, {1, 2}) * T64({2}, {3, 4});
  EXPECT_EQ(p.data()[0], 3.0);
  EXPECT_EQ(p.data()[1], 8.0);
  auto d = T64({2}, {1, 2}) - T64({2}, {3, 5});
  EXPECT_EQ(d.data()[0], -2.0);
  EXPECT_EQ(d.data()[1], -3.0);
  EXPECT_EQ(mot::scale(T64({1}, {2}), 1.5).item(), 3.0);
}

TEST(Elementwise, IncompatibleShapesRejected) {
  EXPECT_THROW(T64::zeros({2, 3}) + T64::zeros({3, 2}), mot::DimensionError);
  EXPECT_THROW(T64::zeros({2}) + T64::zeros({3}), mot::DimensionError);
}

TEST(Elementwise, ScalarBroadcastGradientSums) {
  T64 x({3}, {1, 2, 3}, true);
  auto s = T64::scalar(2.0, true);
  mot::backward(mot::sum(x * s));
  EXPECT_EQ(s.grad()[0], 6.0);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(x.grad()[i], 2.0);
}

TEST(Activation, KnownPoints) {
  EXPECT_EQ(mot::activation(T64::scalar(0.0)).item(), 0.0);
  EXPECT_NEAR(mot::activation(T64::scalar(10.0)).item(), 10.0, 1e-9);
  EXPECT_NEAR(mot::activation(T64::scalar(-10.0)).item(), 0.0, 1e-9);
}

TEST(Activation, MatchesTanhFormula) {
  for (double x = -4.0; x <= 4.0; x += 0.37) {
    EXPECT_NEAR(mot::activation(T64::scalar(x)).item(), gelu_reference(x), 1e-14);
  }
}

TEST(Softmax, UniformInputs) {
  auto y = mot::softmax_dim(T64({4}, {0, 0, 0, 0}), 0, 1.0);
  for (double v : y.data()) EXPECT_NEAR(v, 0.25, 1e-15);
}

TEST(Softmax, LogThree) {
  auto y = mot::softmax_dim(T64({2}, {0.0, std::log(3.0)}), 0, 1.0);
  EXPECT_NEAR(y.data()[0], 0.25, 1e-15);
  EXPECT_NEAR(y.data()[1], 0.75, 1e-15);
}

TEST(Softmax, TinyTemperatureIsOneHot) {
  auto rng = mot::make_rng(14);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = mot::random_normal<double>({7}, rng, 1.0);
    auto y = mot::softmax_dim(x, 0, 1e-6);
    const auto arg = std::max_element(x.data().begin(), x.data().end()) - x.data().begin();
    for (std::size_t i = 0; i < 7; ++i) {
      EXPECT_NEAR(y.data()[i], static_cast<std::ptrdiff_t>(i) == arg ? 1.0 : 0.0, 1e-6);
    }
  }
}

TEST(Softmax, NonPositiveTemperatureIsDomainError) {
  EXPECT_THROW(mot::softmax_dim(T64({2}, {1, 2}), 0, 0.0), mot::DomainError);
  EXPECT_THROW(mot::softmax_dim(T64({2}, {1, 2}), 0, -1.0), mot::DomainError);
  EXPECT_THROW(mot::softmax_dim(T64({2}, {1, 2}), 0, T64::scalar(0.0)), mot::DomainError);
}

TEST(Softmax, InvalidAxisRejected) {
  EXPECT_THROW(mot::softmax_dim(T64::zeros({2, 2}), 2, 1.0), mot::DimensionError);
}

TEST(Softmax, SlicesSumToOneAcrossTemperatures) {
  auto rng = mot::make_rng(15);
  std::uniform_real_distribution<double> log_tau(std::log(1e-6), std::log(1e3));
  for (int trial = 0; trial < 200; ++trial) {
    const double tau = std::exp(log_tau(rng));
    auto x = mot::random_normal<double>({3, 5, 4}, rng, 3.0);
    for (std::size_t dim = 0; dim < 3; ++dim) {
      auto y = mot::softmax_dim(x, dim, tau);
      const auto& s = x.shape();
      std::size_t outer = 1, inner = 1;
      for (std::size_t i = 0; i < dim; ++i) outer *= s[i];
      for (std::size_t i = dim + 1; i < 3; ++i) inner *= s[i];
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < inner; ++j) {
          double total = 0.0;
          for (std::size_t i = 0; i < s[dim]; ++i) {
            const double v = y.data()[(o * s[dim] + i) * inner + j];
            EXPECT_GE(v, 0.0);
            total += v;
          }
          EXPECT_NEAR(total, 1.0, 1e-6);
        }
    }
  }
}

TEST(Softmax, ShiftInvariance) {
  auto rng = mot::make_rng(16);
  for (int trial = 0; trial < 50; ++trial) {
    auto x = mot::random_normal<double>({2, 6}, rng, 2.0);
    auto shifted = x.clone();
    const double c = 3.25 * (trial - 25);
    for (std::size_t i = 6; i < 12; ++i) shifted.mutable_data()[i] += c;  // second row only
    auto a = mot::softmax_dim(x, 1, 0.8);
    auto b = mot::softmax_dim(shifted, 1, 0.8);
    for (std::size_t i = 0; i < 12; ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 1e-13);
  }
}

TEST(LayerNorm, ConstantVectorGivesBias) {
  auto y = mot::layer_norm(T64({4}, {2, 2, 2, 2}), T64({4}, {1, 1, 1, 1}), T64({4}, {0.5, -1, 0, 3}));
  EXPECT_EQ(y.data()[0], 0.5);
  EXPECT_EQ(y.data()[1], -1.0);
  EXPECT_EQ(y.data()[3], 3.0);
}

TEST(LayerNorm, AlreadyNormalizedPair) {
  auto y = mot::layer_norm(T64({2}, {1, -1}), T64({2}, {1, 1}), T64({2}, {0, 0}));
  // variance 1, so only the epsilon changes the scale
  EXPECT_NEAR(y.data()[0], 1.0 / std::sqrt(1.0 + 1e-5), 1e-15);
  EXPECT_NEAR(y.data()[1], -1.0 / std::sqrt(1.0 + 1e-5), 1e-15);
}

TEST(LayerNorm, RandomVectorStatistics) {
  auto rng = mot::make_rng(17);
  auto x = mot::random_normal<double>({5, 64}, rng, 3.0);
  auto y = mot::layer_norm(x, T64::full({64}, 1.0), T64::zeros({64}));
  for (std::size_t r = 0; r < 5; ++r) {
    double mean = 0.0, var = 0.0;
    for (std::size_t c = 0; c < 64; ++c) mean += y.data()[r * 64 + c];
    mean /= 64;
    for (std::size_t c = 0; c < 64; ++c) var += std::pow(y.data()[r * 64 + c] - mean, 2);
    var /= 64;
    EXPECT_LT(std::abs(mean), 1e-6);
    EXPECT_LT(std::abs(var - 1.0), 1e-4);
  }
}

TEST(Embedding, LookupAndRepeats) {
  T64 table({3, 2}, {0, 1, 10, 11, 20, 21});
  const std::vector<std::int32_t> ids{0, 2, 2};
  auto y = mot::embedding_lookup(table, std::span<const std::int32_t>(ids));
  EXPECT_EQ(y.at({0, 0}), 0.0);
  EXPECT_EQ(y.at({0, 1}), 1.0);
  EXPECT_EQ(y.at({1, 1}), 21.0);
  EXPECT_EQ(y.at({2, 0}), 20.0);
}

TEST(Embedding, RepeatedIdGradientDoubles) {
  T64 table({3, 2}, {0, 1, 10, 11, 20, 21}, true);
  const std::vector<std::int32_t> ids{1, 1};
  mot::backward(mot::sum(mot::embedding_lookup(table, std::span<const std::int32_t>(ids))));
  const std::vector<double> expect{0, 0, 2, 2, 0, 0};
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(table.grad()[i], expect[i]);
}

TEST(Embedding, OutOfRangeIsIndexError) {
  const std::vector<std::int32_t> bad{3};
  const std::vector<std::int32_t> negative{-1};
  EXPECT_THROW(mot::embedding_lookup(T64::zeros({3, 2}), std::span<const std::int32_t>(bad)), mot::IndexError);
  EXPECT_THROW(mot::embedding_lookup(T64::zeros({3, 2}), std::span<const std::int32_t>(negative)),
               mot::IndexError);
}

TEST(CrossEntropy, UniformLogits) {
  const std::vector<std::int32_t> t{2};
  EXPECT_NEAR(mot::cross_entropy(T64::zeros({1, 4}), std::span<const std::int32_t>(t)).item(),
              std::log(4.0), 1e-15);
}

TEST(CrossEntropy, ConfidentTarget) {
  const std::vector<std::int32_t> t{1};
  T64 logits({1, 3}, {0, 1000, 0});
  EXPECT_NEAR(mot::cross_entropy(logits, std::span<const std::int32_t>(t)).item(), 0.0, 1e-12);
}

TEST(CrossEntropy, MatchesDirectFormula) {
  auto rng = mot::make_rng(18);
  auto logits = mot::random_normal<double>({2, 3}, rng, 1.0);
  const std::vector<std::int32_t> t{2, 0};
  double expect = 0.0;
  for (std::size_t r = 0; r < 2; ++r) {
    double z = 0.0;
    for (std::size_t c = 0; c < 3; ++c) z += std::exp(logits.at({r, c}));
    expect += -std::log(std::exp(logits.at({r, static_cast<std::size_t>(t[r])})) / z);
  }
  expect /= 2;
  EXPECT_NEAR(mot::cross_entropy(logits, std::span<const std::int32_t>(t)).item(), expect, 1e-10);
}

TEST(CrossEntropy, TargetOutOfRange) {
  const std::vector<std::int32_t> t{4};
  EXPECT_THROW(mot::cross_entropy(T64::zeros({1, 4}), std::span<const std::int32_t>(t)), mot::IndexError);
}

TEST(Permute3, MatchesIndexArithmetic) {
  auto rng = mot::make_rng(19);
  auto x = mot::random_normal<double>({2, 3, 4}, rng, 1.0);
  auto y = mot::permute3(x, {2, 0, 1});
  ASSERT_EQ(y.shape(), (mot::Shape{4, 2, 3}));
  for (std::size_t a = 0; a < 2; ++a)
    for (std::size_t b = 0; b < 3; ++b)
      for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(y.at({c, a, b}), x.at({a, b, c}));
}

TEST(Attention, SingleKeyReturnsValue) {
  auto rng = mot::make_rng(20);
  auto q = mot::random_normal<double>({1, 1, 4}, rng, 1.0);
  auto k = mot::random_normal<double>({1, 1, 4}, rng, 1.0);
  auto v = mot::random_normal<double>({1, 1, 4}, rng, 1.0);
  auto y = mot::causal_attention_core(q, k, v, 2);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y.data()[i], v.data()[i], 1e-15);
}

TEST(Attention, TwoTokensOneHeadByHand) {
  T64 q({1, 2, 2}, {1, 0, 0.5, -1});
  T64 k({1, 2, 2}, {2, 1, -1, 3});
  T64 v({1, 2, 2}, {1, 2, 3, 4});
  auto y = mot::causal_attention_core(q, k, v, 1);
  // row 0 sees only key 0
  EXPECT_NEAR(y.at({0, 0, 0}), 1.0, 1e-12);
  EXPECT_NEAR(y.at({0, 0, 1}), 2.0, 1e-12);
  const double s0 = (0.5 * 2 + -1 * 1) / std::sqrt(2.0);
  const double s1 = (0.5 * -1 + -1 * 3) / std::sqrt(2.0);
  const double p0 = std::exp(s0) / (std::exp(s0) + std::exp(s1));
  EXPECT_NEAR(y.at({0, 1, 0}), p0 * 1 + (1 - p0) * 3, 1e-10);
  EXPECT_NEAR(y.at({0, 1, 1}), p0 * 2 + (1 - p0) * 4, 1e-10);
}

TEST(Attention, FutureKeysDoNotAffectPast) {
  auto rng = mot::make_rng(21);
  auto q = mot::random_normal<double>({2, 5, 8}, rng, 1.0);
  auto k = mot::random_normal<double>({2, 5, 8}, rng, 1.0);
  auto v = mot::random_normal<double>({2, 5, 8}, rng, 1.0);
  auto base = mot::causal_attention_core(q, k, v, 2);
  auto k2 = k.clone(), v2 = v.clone();
  for (std::size_t c = 0; c < 8; ++c) {
    k2.mutable_data()[(0 * 5 + 3) * 8 + c] += 5.0;
    v2.mutable_data()[(0 * 5 + 3) * 8 + c] -= 5.0;
  }
  auto moved = mot::causal_attention_core(q, k2, v2, 2);
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(base.at({0, t, c}), moved.at({0, t, c}));
}

TEST(GatherRows, RepeatedIndicesScatterGradients) {
  T64 x({2, 2}, {1, 2, 3, 4}, true);
  const std::vector<std::size_t> idx{1, 1, 0};
  auto y = mot::gather_rows(x, std::span<const std::size_t>(idx));
  EXPECT_EQ(y.at({1, 0}), 3.0);
  mot::backward(mot::sum(y));
  EXPECT_EQ(x.grad()[0], 1.0);
  EXPECT_EQ(x.grad()[2], 2.0);
}

TEST(Linear, MatchesMatmulPlusBias) {
  auto rng = mot::make_rng(22);
  auto x = mot::random_normal<double>({3, 4}, rng, 1.0);
  auto w = mot::random_normal<double>({4, 2}, rng, 1.0);
  auto b = mot::random_normal<double>({2}, rng, 1.0);
  auto y = mot::linear(x, w, b);
  auto ref = loop_matmul(x.values(), w.values(), 3, 4, 2);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(y.at({r, c}), ref[r * 2 + c] + b.data()[c], 1e-12);
}
