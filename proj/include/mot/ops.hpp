#pragma once

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "mot/tensor.hpp"

namespace mot {

namespace detail {

template <typename T>
using RowMatrix =
    Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

inline void require_same_shape(const Shape& a, const Shape& b,
                               const char* op) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_string(a) + " vs " + shape_string(b));
  }
}

inline void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " +
                         std::to_string(rank) + ", got " + shape_string(s));
  }
}

// Batched C_p = op(A_p) * op(B_p) on raw row-major buffers.
template <typename T>
void gemm_batch(const T* a, const T* b, T* c, std::size_t batch,
                std::size_t a_rows, std::size_t a_cols, std::size_t b_rows,
                std::size_t b_cols, bool trans_a, bool trans_b,
                bool accumulate) {
  const std::size_t m = trans_a ? a_cols : a_rows;
  const std::size_t n = trans_b ? b_rows : b_cols;
  for (std::size_t p = 0; p < batch; ++p) {
    ConstMatrixMap<T> A(a + p * a_rows * a_cols, a_rows, a_cols);
    ConstMatrixMap<T> B(b + p * b_rows * b_cols, b_rows, b_cols);
    MatrixMap<T> C(c + p * m * n, m, n);
    if (!accumulate) C.setZero();
    if (!trans_a && !trans_b) {
      C.noalias() += A * B;
    } else if (trans_a && !trans_b) {
      C.noalias() += A.transpose() * B;
    } else if (!trans_a && trans_b) {
      C.noalias() += A * B.transpose();
    } else {
      C.noalias() += A.transpose() * B.transpose();
    }
  }
}

template <typename T>
T gelu_value(T x) {
  constexpr T k = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T c = T(0.044715);
  return T(0.5) * x * (T(1) + std::tanh(k * (x + c * x * x * x)));
}

template <typename T>
T gelu_derivative(T x) {
  constexpr T k = T(0.7978845608028654);
  constexpr T c = T(0.044715);
  const T t = std::tanh(k * (x + c * x * x * x));
  return T(0.5) * (T(1) + t) +
         T(0.5) * x * (T(1) - t * t) * k * (T(1) + T(3) * c * x * x);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + x.shape_string() + " as " +
                         shape_string(shape));
  }
  return detail::make_result<T>(
      "reshape", std::move(shape), x.values(), {&x}, [](Node<T>& out) {
        if (T* g = detail::grad_of(out.inputs[0])) {
          for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] += out.grad[i];
        }
      });
}

/// Permutes the axes of a rank-3 tensor; out.dim(i) == x.dim(perm[i]).
template <typename T>
Tensor<T> permute3(const Tensor<T>& x, std::array<std::size_t, 3> perm) {
  detail::require_rank(x.shape(), 3, "permute3");
  std::array<bool, 3> used{};
  for (auto p : perm) {
    if (p > 2 || used[p]) throw DimensionError("permute3: invalid permutation");
    used[p] = true;
  }
  const Shape& s = x.shape();
  Shape out_shape{s[perm[0]], s[perm[1]], s[perm[2]]};
  const std::array<std::size_t, 3> in_strides{s[1] * s[2], s[2], 1};
  const std::array<std::size_t, 3> stride{in_strides[perm[0]],
                                          in_strides[perm[1]],
                                          in_strides[perm[2]]};
  std::vector<std::size_t> src(x.numel());
  std::size_t k = 0;
  for (std::size_t i = 0; i < out_shape[0]; ++i)
    for (std::size_t j = 0; j < out_shape[1]; ++j)
      for (std::size_t l = 0; l < out_shape[2]; ++l)
        src[k++] = i * stride[0] + j * stride[1] + l * stride[2];
  Buffer<T> data(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < src.size(); ++i) data[i] = in[src[i]];
  return detail::make_result<T>(
      "permute3", std::move(out_shape), std::move(data), {&x},
      [src = std::move(src)](Node<T>& out) {
        if (T* g = detail::grad_of(out.inputs[0])) {
          for (std::size_t i = 0; i < src.size(); ++i) g[src[i]] += out.grad[i];
        }
      });
}

/// Gathers rows of x (viewed as [rows x rest]) into [index.size() x rest].
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> index) {
  const std::size_t rows = x.dim(0);
  const std::size_t width = x.numel() / rows;
  Shape out_shape = x.shape();
  out_shape[0] = index.size();
  Buffer<T> data(index.size() * width);
  const auto in = x.data();
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= rows) {
      throw IndexError("gather_rows: row " + std::to_string(index[r]) +
                       " out of range for " + x.shape_string());
    }
    std::copy_n(in.begin() + index[r] * width, width,
                data.begin() + r * width);
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return detail::make_result<T>(
      "gather_rows", std::move(out_shape), std::move(data), {&x},
      [idx = std::move(idx), width](Node<T>& out) {
        if (T* g = detail::grad_of(out.inputs[0])) {
          for (std::size_t r = 0; r < idx.size(); ++r) {
            T* dst = g + idx[r] * width;
            const T* src = out.grad.data() + r * width;
            for (std::size_t c = 0; c < width; ++c) dst[c] += src[c];
          }
        }
      });
}

template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table,
                           std::span<const std::int32_t> ids) {
  detail::require_rank(table.shape(), 2, "embedding_lookup");
  std::vector<std::size_t> rows(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= table.dim(0)) {
      throw IndexError("embedding_lookup: id " + std::to_string(ids[i]) +
                       " outside vocabulary of size " +
                       std::to_string(table.dim(0)));
    }
    rows[i] = static_cast<std::size_t>(ids[i]);
  }
  return gather_rows(table, std::span<const std::size_t>(rows));
}

// ---------------------------------------------------------------------------
// Elementwise

enum class BinaryOp { add, sub, mul };

template <typename T>
Tensor<T> elementwise(const Tensor<T>& a, const Tensor<T>& b, BinaryOp op) {
  const bool b_scalar = b.numel() == 1 && a.numel() != 1;
  if (!b_scalar) detail::require_same_shape(a.shape(), b.shape(), "elementwise");
  const auto av = a.data();
  const auto bv = b.data();
  Buffer<T> data(a.numel());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const T y = bv[b_scalar ? 0 : i];
    switch (op) {
      case BinaryOp::add: data[i] = av[i] + y; break;
      case BinaryOp::sub: data[i] = av[i] - y; break;
      case BinaryOp::mul: data[i] = av[i] * y; break;
    }
  }
  const char* name = op == BinaryOp::add   ? "add"
                     : op == BinaryOp::sub ? "sub"
                                           : "mul";
  return detail::make_result<T>(
      name, a.shape(), std::move(data), {&a, &b},
      [op, b_scalar](Node<T>& out) {
        const auto& an = out.inputs[0];
        const auto& bn = out.inputs[1];
        T* ga = detail::grad_of(an);
        T* gb = detail::grad_of(bn);
        const auto& go = out.grad;
        for (std::size_t i = 0; i < go.size(); ++i) {
          const std::size_t j = b_scalar ? 0 : i;
          switch (op) {
            case BinaryOp::add:
              if (ga) ga[i] += go[i];
              if (gb) gb[j] += go[i];
              break;
            case BinaryOp::sub:
              if (ga) ga[i] += go[i];
              if (gb) gb[j] -= go[i];
              break;
            case BinaryOp::mul:
              if (ga) ga[i] += go[i] * bn->data[j];
              if (gb) gb[j] += go[i] * an->data[i];
              break;
          }
        }
      });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise(a, b, BinaryOp::add);
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise(a, b, BinaryOp::sub);
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise(a, b, BinaryOp::mul);
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  Buffer<T> data(a.values());
  for (auto& v : data) v *= factor;
  return detail::make_result<T>(
      "scale", a.shape(), std::move(data), {&a}, [factor](Node<T>& out) {
        if (T* g = detail::grad_of(out.inputs[0])) {
          for (std::size_t i = 0; i < out.grad.size(); ++i)
            g[i] += factor * out.grad[i];
        }
      });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T value) {
  Buffer<T> data(a.values());
  for (auto& v : data) v += value;
  return detail::make_result<T>(
      "add_scalar", a.shape(), std::move(data), {&a}, [](Node<T>& out) {
        if (T* g = detail::grad_of(out.inputs[0])) {
          for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] += out.grad[i];
        }
      });
}

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, b);
}
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
  return sub(a, b);
}
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) {
  return mul(a, b);
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  Buffer<T> data(x.values());
  for (auto& v : data) v = std::exp(v);
  return detail::make_result<T>(
      "exp", x.shape(), std::move(data), {&x}, [](Node<T>& out) {
        if (T* g = detail::grad_of(out.inputs[0])) {
          for (std::size_t i = 0; i < out.grad.size(); ++i)
            g[i] += out.grad[i] * out.data[i];
        }
      });
}

/// GELU, tanh approximation.
template <typename T>
Tensor<T> activation(const Tensor<T>& x) {
  Buffer<T> data(x.values());
  for (auto& v : data) v = detail::gelu_value(v);
  return detail::make_result<T>(
      "gelu", x.shape(), std::move(data), {&x}, [](Node<T>& out) {
        const auto& in = out.inputs[0];
        if (T* g = detail::grad_of(in)) {
          for (std::size_t i = 0; i < out.grad.size(); ++i)
            g[i] += out.grad[i] * detail::gelu_derivative(in->data[i]);
        }
      });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = T(0);
  for (T v : x.data()) total += v;
  return detail::make_result<T>(
      "sum", Shape{1}, Buffer<T>{total}, {&x}, [](Node<T>& out) {
        if (T* g = detail::grad_of(out.inputs[0])) {
          const T go = out.grad[0];
          const std::size_t n = out.inputs[0]->data.size();
          for (std::size_t i = 0; i < n; ++i) g[i] += go;
        }
      });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

// ---------------------------------------------------------------------------
// Matrix products

/// Batched product op(a_p) * op(b_p) over a shared leading batch dimension.
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false,
              bool trans_b = false) {
  detail::require_rank(a.shape(), 3, "bmm");
  detail::require_rank(b.shape(), 3, "bmm");
  const std::size_t batch = a.dim(0);
  const std::size_t ar = a.dim(1), ac = a.dim(2), br = b.dim(1), bc = b.dim(2);
  const std::size_t m = trans_a ? ac : ar;
  const std::size_t k = trans_a ? ar : ac;
  const std::size_t kb = trans_b ? bc : br;
  const std::size_t n = trans_b ? br : bc;
  if (b.dim(0) != batch || k != kb) {
    throw DimensionError("bmm: incompatible shapes " + a.shape_string() +
                         " and " + b.shape_string());
  }
  Buffer<T> data(batch * m * n);
  detail::gemm_batch(a.data().data(), b.data().data(), data.data(), batch, ar,
                     ac, br, bc, trans_a, trans_b, false);
  return detail::make_result<T>(
      "bmm", Shape{batch, m, n}, std::move(data), {&a, &b},
      [=](Node<T>& out) {
        const auto& an = out.inputs[0];
        const auto& bn = out.inputs[1];
        const T* A = an->data.data();
        const T* B = bn->data.data();
        const T* G = out.grad.data();
        if (T* ga = detail::grad_of(an)) {
          for (std::size_t p = 0; p < batch; ++p) {
            detail::ConstMatrixMap<T> Bp(B + p * br * bc, br, bc);
            detail::ConstMatrixMap<T> Gp(G + p * m * n, m, n);
            detail::MatrixMap<T> GA(ga + p * ar * ac, ar, ac);
            if (!trans_a) {
              if (!trans_b) GA.noalias() += Gp * Bp.transpose();
              else GA.noalias() += Gp * Bp;
            } else {
              if (!trans_b) GA.noalias() += Bp * Gp.transpose();
              else GA.noalias() += Bp.transpose() * Gp.transpose();
            }
          }
        }
        if (T* gb = detail::grad_of(bn)) {
          for (std::size_t p = 0; p < batch; ++p) {
            detail::ConstMatrixMap<T> Ap(A + p * ar * ac, ar, ac);
            detail::ConstMatrixMap<T> Gp(G + p * m * n, m, n);
            detail::MatrixMap<T> GB(gb + p * br * bc, br, bc);
            if (!trans_b) {
              if (!trans_a) GB.noalias() += Ap.transpose() * Gp;
              else GB.noalias() += Ap * Gp;
            } else {
              if (!trans_a) GB.noalias() += Gp.transpose() * Ap;
              else GB.noalias() += Gp.transpose() * Ap.transpose();
            }
          }
        }
      });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + a.shape_string() +
                         " and " + b.shape_string());
  }
  const std::size_t m = a.dim(0), n = b.dim(1);
  auto a3 = reshape(a, Shape{1, a.dim(0), a.dim(1)});
  auto b3 = reshape(b, Shape{1, b.dim(0), b.dim(1)});
  return reshape(bmm(a3, b3), Shape{m, n});
}

/// Affine map over the last axis: x[..., k] * w[k, n] + bias[n].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  detail::require_rank(w.shape(), 2, "linear");
  const std::size_t k = w.dim(0), n = w.dim(1);
  if (x.shape().back() != k || bias.numel() != n) {
    throw DimensionError("linear: input " + x.shape_string() + ", weight " +
                         w.shape_string() + ", bias " + bias.shape_string());
  }
  const std::size_t rows = x.numel() / k;
  Shape out_shape = x.shape();
  out_shape.back() = n;
  Buffer<T> data(rows * n);
  {
    detail::ConstMatrixMap<T> X(x.data().data(), rows, k);
    detail::ConstMatrixMap<T> W(w.data().data(), k, n);
    detail::MatrixMap<T> Y(data.data(), rows, n);
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> b(bias.data().data(), n);
    Y.noalias() = X * W;
    Y.rowwise() += b;
  }
  return detail::make_result<T>(
      "linear", std::move(out_shape), std::move(data), {&x, &w, &bias},
      [rows, k, n](Node<T>& out) {
        const auto& xn = out.inputs[0];
        const auto& wn = out.inputs[1];
        const auto& bn = out.inputs[2];
        detail::ConstMatrixMap<T> G(out.grad.data(), rows, n);
        if (T* gx = detail::grad_of(xn)) {
          detail::ConstMatrixMap<T> W(wn->data.data(), k, n);
          detail::MatrixMap<T> GX(gx, rows, k);
          GX.noalias() += G * W.transpose();
        }
        if (T* gw = detail::grad_of(wn)) {
          detail::ConstMatrixMap<T> X(xn->data.data(), rows, k);
          detail::MatrixMap<T> GW(gw, k, n);
          GW.noalias() += X.transpose() * G;
        }
        if (T* gb = detail::grad_of(bn)) {
          Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> GB(gb, n);
          GB += G.colwise().sum();
        }
      });
}

/// x[..., n] + bias[n], or x[P, M, N] + bias[P, N] broadcast over M.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  std::size_t outer, mid, inner;
  if (bias.rank() == 1 && bias.dim(0) == x.shape().back()) {
    outer = 1;
    inner = bias.dim(0);
    mid = x.numel() / inner;
  } else if (bias.rank() == 2 && x.rank() == 3 && bias.dim(0) == x.dim(0) &&
             bias.dim(1) == x.dim(2)) {
    outer = x.dim(0);
    mid = x.dim(1);
    inner = x.dim(2);
  } else {
    throw DimensionError("add_bias: cannot broadcast " + bias.shape_string() +
                         " onto " + x.shape_string());
  }
  Buffer<T> data(x.values());
  const auto b = bias.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t m = 0; m < mid; ++m) {
      T* row = data.data() + (o * mid + m) * inner;
      const T* br = b.data() + o * inner;
      for (std::size_t i = 0; i < inner; ++i) row[i] += br[i];
    }
  return detail::make_result<T>(
      "add_bias", x.shape(), std::move(data), {&x, &bias},
      [outer, mid, inner](Node<T>& out) {
        if (T* gx = detail::grad_of(out.inputs[0])) {
          for (std::size_t i = 0; i < out.grad.size(); ++i) gx[i] += out.grad[i];
        }
        if (T* gb = detail::grad_of(out.inputs[1])) {
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t m = 0; m < mid; ++m) {
              const T* row = out.grad.data() + (o * mid + m) * inner;
              for (std::size_t i = 0; i < inner; ++i) gb[o * inner + i] += row[i];
            }
        }
      });
}

// ---------------------------------------------------------------------------
// Normalization and losses

namespace detail {

template <typename T>
Tensor<T> softmax_impl(const Tensor<T>& x, std::size_t dim, T tau,
                       const Tensor<T>* tau_tensor) {
  if (dim >= x.rank()) {
    throw DimensionError("softmax_dim: axis " + std::to_string(dim) +
                         " invalid for " + x.shape_string());
  }
  if (!(tau > T(0))) {
    throw DomainError("softmax_dim: temperature must be positive, got " +
                      std::to_string(tau));
  }
  const Shape& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < dim; ++i) outer *= s[i];
  for (std::size_t i = dim + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[dim];
  const auto in = x.data();
  Buffer<T> data(x.numel());
  const T inv_tau = T(1) / tau;
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < inner; ++j) {
      const std::size_t base = o * n * inner + j;
      T mx = in[base];
      for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, in[base + i * inner]);
      T total = T(0);
      for (std::size_t i = 0; i < n; ++i) {
        const T e = std::exp((in[base + i * inner] - mx) * inv_tau);
        data[base + i * inner] = e;
        total += e;
      }
      const T inv = T(1) / total;
      for (std::size_t i = 0; i < n; ++i) data[base + i * inner] *= inv;
    }
  auto backward_fn = [outer, inner, n, tau, has_tau = tau_tensor != nullptr](
                         Node<T>& out) {
    const auto& xn = out.inputs[0];
    T* gx = grad_of(xn);
    T* gt = has_tau ? grad_of(out.inputs[1]) : nullptr;
    T dtau = T(0);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t j = 0; j < inner; ++j) {
        const std::size_t base = o * n * inner + j;
        T dot = T(0);
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t at = base + i * inner;
          dot += out.grad[at] * out.data[at];
        }
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t at = base + i * inner;
          const T dz = out.data[at] * (out.grad[at] - dot);
          if (gx) gx[at] += dz / tau;
          dtau -= dz * xn->data[at];
        }
      }
    if (gt) gt[0] += dtau / (tau * tau);
  };
  if (tau_tensor) {
    return make_result<T>("softmax", s, std::move(data), {&x, tau_tensor},
                          std::move(backward_fn));
  }
  return make_result<T>("softmax", s, std::move(data), {&x},
                        std::move(backward_fn));
}

}  // namespace detail

/// Softmax along `dim` of x / temperature, stabilized by max subtraction.
template <typename T>
Tensor<T> softmax_dim(const Tensor<T>& x, std::size_t dim, T temperature = T(1)) {
  return detail::softmax_impl(x, dim, temperature, static_cast<const Tensor<T>*>(nullptr));
}

/// Softmax with a differentiable scalar temperature tensor.
template <typename T>
Tensor<T> softmax_dim(const Tensor<T>& x, std::size_t dim,
                      const Tensor<T>& temperature) {
  if (temperature.numel() != 1) {
    throw DimensionError("softmax_dim: temperature must be a scalar, got " +
                         temperature.shape_string());
  }
  return detail::softmax_impl(x, dim, temperature.item(), &temperature);
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain,
                     const Tensor<T>& bias, T eps = T(1e-5)) {
  const std::size_t d = x.shape().back();
  if (gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layer_norm: input " + x.shape_string() + ", gain " +
                         gain.shape_string() + ", bias " + bias.shape_string());
  }
  const std::size_t rows = x.numel() / d;
  const auto in = x.data();
  const auto g = gain.data();
  const auto b = bias.data();
  Buffer<T> data(x.numel());
  Buffer<T> xhat(x.numel());
  Buffer<T> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = in.data() + r * d;
    T mu = T(0);
    for (std::size_t i = 0; i < d; ++i) mu += row[i];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t i = 0; i < d; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<T>(d);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t i = 0; i < d; ++i) {
      const T h = (row[i] - mu) * rstd[r];
      xhat[r * d + i] = h;
      data[r * d + i] = h * g[i] + b[i];
    }
  }
  return detail::make_result<T>(
      "layer_norm", x.shape(), std::move(data), {&x, &gain, &bias},
      [rows, d, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& out) {
        const auto& gn = out.inputs[1];
        T* gx = detail::grad_of(out.inputs[0]);
        T* gg = detail::grad_of(gn);
        T* gb = detail::grad_of(out.inputs[2]);
        Buffer<T> dxhat(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* go = out.grad.data() + r * d;
          const T* h = xhat.data() + r * d;
          if (gg || gb) {
            for (std::size_t i = 0; i < d; ++i) {
              if (gg) gg[i] += go[i] * h[i];
              if (gb) gb[i] += go[i];
            }
          }
          if (!gx) continue;
          T mean_d = T(0), mean_dh = T(0);
          for (std::size_t i = 0; i < d; ++i) {
            dxhat[i] = go[i] * gn->data[i];
            mean_d += dxhat[i];
            mean_dh += dxhat[i] * h[i];
          }
          mean_d /= static_cast<T>(d);
          mean_dh /= static_cast<T>(d);
          for (std::size_t i = 0; i < d; ++i)
            gx[r * d + i] += rstd[r] * (dxhat[i] - mean_d - h[i] * mean_dh);
        }
      });
}

/// Mean over rows of -log softmax(logits)[target].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits,
                        std::span<const std::int32_t> targets) {
  const std::size_t v = logits.shape().back();
  const std::size_t rows = logits.numel() / v;
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) +
                         " targets for logits " + logits.shape_string());
  }
  const auto in = logits.data();
  Buffer<T> probs(logits.numel());
  std::vector<std::int32_t> tgt(targets.begin(), targets.end());
  T total = T(0);
  for (std::size_t r = 0; r < rows; ++r) {
    if (tgt[r] < 0 || static_cast<std::size_t>(tgt[r]) >= v) {
      throw IndexError("cross_entropy: target " + std::to_string(tgt[r]) +
                       " outside [0, " + std::to_string(v) + ")");
    }
    const T* row = in.data() + r * v;
    T mx = *std::max_element(row, row + v);
    T s = T(0);
    for (std::size_t i = 0; i < v; ++i) {
      probs[r * v + i] = std::exp(row[i] - mx);
      s += probs[r * v + i];
    }
    const T lse = mx + std::log(s);
    total += lse - row[tgt[r]];
    const T inv = T(1) / s;
    for (std::size_t i = 0; i < v; ++i) probs[r * v + i] *= inv;
  }
  const T loss = total / static_cast<T>(rows);
  return detail::make_result<T>(
      "cross_entropy", Shape{1}, Buffer<T>{loss}, {&logits},
      [rows, v, probs = std::move(probs), tgt = std::move(tgt)](Node<T>& out) {
        if (T* g = detail::grad_of(out.inputs[0])) {
          const T scale_ = out.grad[0] / static_cast<T>(rows);
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t i = 0; i < v; ++i)
              g[r * v + i] += scale_ * probs[r * v + i];
            g[r * v + tgt[r]] -= scale_;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Attention

/// Multi-head scaled dot-product attention over [B x T x d] projections;
/// position t attends only to positions <= t.
template <typename T>
Tensor<T> causal_attention_core(const Tensor<T>& q, const Tensor<T>& k,
                                const Tensor<T>& v, std::size_t n_heads) {
  detail::require_rank(q.shape(), 3, "causal_attention");
  detail::require_same_shape(q.shape(), k.shape(), "causal_attention");
  detail::require_same_shape(q.shape(), v.shape(), "causal_attention");
  const std::size_t B = q.dim(0), L = q.dim(1), d = q.dim(2);
  if (n_heads == 0 || d % n_heads != 0) {
    throw DimensionError("causal_attention: d_model " + std::to_string(d) +
                         " not divisible by n_heads " + std::to_string(n_heads));
  }
  const std::size_t dh = d / n_heads;
  const T scale_ = T(1) / std::sqrt(static_cast<T>(dh));
  const T* Q = q.data().data();
  const T* K = k.data().data();
  const T* V = v.data().data();
  Buffer<T> probs(B * n_heads * L * L, T(0));
  Buffer<T> data(q.numel(), T(0));
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < n_heads; ++h) {
      T* P = probs.data() + (b * n_heads + h) * L * L;
      for (std::size_t t = 0; t < L; ++t) {
        const T* qt = Q + (b * L + t) * d + h * dh;
        T* pt = P + t * L;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j <= t; ++j) {
          const T* kj = K + (b * L + j) * d + h * dh;
          T s = T(0);
          for (std::size_t c = 0; c < dh; ++c) s += qt[c] * kj[c];
          pt[j] = s * scale_;
          mx = std::max(mx, pt[j]);
        }
        T total = T(0);
        for (std::size_t j = 0; j <= t; ++j) {
          pt[j] = std::exp(pt[j] - mx);
          total += pt[j];
        }
        const T inv = T(1) / total;
        T* ot = data.data() + (b * L + t) * d + h * dh;
        for (std::size_t j = 0; j <= t; ++j) {
          pt[j] *= inv;
          const T* vj = V + (b * L + j) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) ot[c] += pt[j] * vj[c];
        }
      }
    }
  return detail::make_result<T>(
      "causal_attention", q.shape(), std::move(data), {&q, &k, &v},
      [=, probs = std::move(probs)](Node<T>& out) {
        const T* Qd = out.inputs[0]->data.data();
        const T* Kd = out.inputs[1]->data.data();
        const T* Vd = out.inputs[2]->data.data();
        T* gq = detail::grad_of(out.inputs[0]);
        T* gk = detail::grad_of(out.inputs[1]);
        T* gv = detail::grad_of(out.inputs[2]);
        Buffer<T> dp(L);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t h = 0; h < n_heads; ++h) {
            const T* P = probs.data() + (b * n_heads + h) * L * L;
            for (std::size_t t = 0; t < L; ++t) {
              const T* go = out.grad.data() + (b * L + t) * d + h * dh;
              const T* pt = P + t * L;
              T dot = T(0);
              for (std::size_t j = 0; j <= t; ++j) {
                const std::size_t row = (b * L + j) * d + h * dh;
                T s = T(0);
                for (std::size_t c = 0; c < dh; ++c) s += go[c] * Vd[row + c];
                dp[j] = s;
                dot += s * pt[j];
                if (gv) {
                  for (std::size_t c = 0; c < dh; ++c) gv[row + c] += pt[j] * go[c];
                }
              }
              const std::size_t qrow = (b * L + t) * d + h * dh;
              for (std::size_t j = 0; j <= t; ++j) {
                const T ds = pt[j] * (dp[j] - dot) * scale_;
                const std::size_t krow = (b * L + j) * d + h * dh;
                if (gq) {
                  for (std::size_t c = 0; c < dh; ++c) gq[qrow + c] += ds * Kd[krow + c];
                }
                if (gk) {
                  for (std::size_t c = 0; c < dh; ++c) gk[krow + c] += ds * Qd[qrow + c];
                }
              }
            }
          }
      });
}

}  // namespace mot
