#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstring>
#include <limits>
#include <string>
#include <vector>

#include "mdepth/tensor.hpp"

// Differentiable primitives. Each op validates shapes, computes the forward
// value, checks it for non-finite entries, and (when recording) attaches a
// closure that routes the upstream gradient to the parents that track
// gradients. No broadcasting beyond the cases documented per op.

namespace mdepth::ops {

namespace detail {

template <class T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using EMap = Eigen::Map<EMat<T>>;
template <class T>
using ECMap = Eigen::Map<const EMat<T>>;

// c(m,n) = a(m,k) * b(k,n), accumulating when acc is true.
template <class T>
void gemm_nn(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n,
             bool acc = false) {
    ECMap<T> A(a, m, k), B(b, k, n);
    EMap<T> C(c, m, n);
    if (acc)
        C.noalias() += A * B;
    else
        C.noalias() = A * B;
}

// c(m,n) = a(k,m)^T * b(k,n)
template <class T>
void gemm_tn(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n,
             bool acc = false) {
    ECMap<T> A(a, k, m), B(b, k, n);
    EMap<T> C(c, m, n);
    if (acc)
        C.noalias() += A.transpose() * B;
    else
        C.noalias() = A.transpose() * B;
}

// c(m,n) = a(m,k) * b(n,k)^T
template <class T>
void gemm_nt(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n,
             bool acc = false) {
    ECMap<T> A(a, m, k), B(b, n, k);
    EMap<T> C(c, m, n);
    if (acc)
        C.noalias() += A * B.transpose();
    else
        C.noalias() = A * B.transpose();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
    const std::int64_t n = a.numel();
    std::vector<T> out(static_cast<std::size_t>(n));
    const T* pa = a.data();
    const T* pb = b.data();
    for (std::int64_t i = 0; i < n; ++i) out[i] = pa[i] + pb[i];
    ensure_finite(out, "add");
    return Tensor<T>::make_op(a.shape(), std::move(out), "add", {a, b},
                              [a, b, n](TensorNode<T>& self) mutable {
                                  if (a.requires_grad()) a.node()->accumulate(self.grad.data(), n);
                                  if (b.requires_grad()) b.node()->accumulate(self.grad.data(), n);
                              });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError("sub: shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
    const std::int64_t n = a.numel();
    std::vector<T> out(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) out[i] = a.data()[i] - b.data()[i];
    ensure_finite(out, "sub");
    return Tensor<T>::make_op(a.shape(), std::move(out), "sub", {a, b},
                              [a, b, n](TensorNode<T>& self) mutable {
                                  if (a.requires_grad()) a.node()->accumulate(self.grad.data(), n);
                                  if (b.requires_grad()) {
                                      auto& g = b.mut_grad();
                                      for (std::int64_t i = 0; i < n; ++i) g[i] -= self.grad[i];
                                  }
                              });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
    const std::int64_t n = a.numel();
    std::vector<T> out(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) out[i] = a.data()[i] * b.data()[i];
    ensure_finite(out, "mul");
    return Tensor<T>::make_op(a.shape(), std::move(out), "mul", {a, b},
                              [a, b, n](TensorNode<T>& self) mutable {
                                  if (a.requires_grad()) {
                                      auto& g = a.mut_grad();
                                      for (std::int64_t i = 0; i < n; ++i)
                                          g[i] += self.grad[i] * b.data()[i];
                                  }
                                  if (b.requires_grad()) {
                                      auto& g = b.mut_grad();
                                      for (std::int64_t i = 0; i < n; ++i)
                                          g[i] += self.grad[i] * a.data()[i];
                                  }
                              });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    const std::int64_t n = a.numel();
    std::vector<T> out(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) out[i] = a.data()[i] * c;
    ensure_finite(out, "scale");
    return Tensor<T>::make_op(a.shape(), std::move(out), "scale", {a},
                              [a, c, n](TensorNode<T>& self) mutable {
                                  if (!a.requires_grad()) return;
                                  auto& g = a.mut_grad();
                                  for (std::int64_t i = 0; i < n; ++i) g[i] += self.grad[i] * c;
                              });
}

template <class T>
Tensor<T> add_const(const Tensor<T>& a, T c) {
    const std::int64_t n = a.numel();
    std::vector<T> out(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) out[i] = a.data()[i] + c;
    ensure_finite(out, "add_const");
    return Tensor<T>::make_op(a.shape(), std::move(out), "add_const", {a},
                              [a, n](TensorNode<T>& self) mutable {
                                  if (a.requires_grad()) a.node()->accumulate(self.grad.data(), n);
                              });
}

/// Natural log; every element must be strictly positive.
template <class T>
Tensor<T> log(const Tensor<T>& a) {
    const std::int64_t n = a.numel();
    std::vector<T> out(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        if (!(a.data()[i] > T(0))) {
            throw NumericError("log: non-positive input at flat index " + std::to_string(i));
        }
        out[i] = std::log(a.data()[i]);
    }
    ensure_finite(out, "log");
    return Tensor<T>::make_op(a.shape(), std::move(out), "log", {a},
                              [a, n](TensorNode<T>& self) mutable {
                                  if (!a.requires_grad()) return;
                                  auto& g = a.mut_grad();
                                  for (std::int64_t i = 0; i < n; ++i)
                                      g[i] += self.grad[i] / a.data()[i];
                              });
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
    const std::int64_t n = a.numel();
    std::vector<T> out(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) out[i] = a.data()[i] > T(0) ? a.data()[i] : T(0);
    return Tensor<T>::make_op(a.shape(), std::move(out), "relu", {a},
                              [a, n](TensorNode<T>& self) mutable {
                                  if (!a.requires_grad()) return;
                                  auto& g = a.mut_grad();
                                  for (std::int64_t i = 0; i < n; ++i)
                                      if (a.data()[i] > T(0)) g[i] += self.grad[i];
                              });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    const std::int64_t n = a.numel();
    std::vector<T> out(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        const T x = a.data()[i];
        out[i] = x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                           : std::exp(x) / (T(1) + std::exp(x));
    }
    ensure_finite(out, "sigmoid");
    std::vector<T> saved = out;
    return Tensor<T>::make_op(a.shape(), std::move(out), "sigmoid", {a},
                              [a, n, saved = std::move(saved)](TensorNode<T>& self) mutable {
                                  if (!a.requires_grad()) return;
                                  auto& g = a.mut_grad();
                                  for (std::int64_t i = 0; i < n; ++i) {
                                      const T s = saved[i];
                                      g[i] += self.grad[i] * s * (T(1) - s);
                                  }
                              });
}

template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
    const std::int64_t n = a.numel();
    constexpr T inv_sqrt2 = T(0.7071067811865475244);
    constexpr T inv_sqrt2pi = T(0.3989422804014326779);
    std::vector<T> out(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        const T x = a.data()[i];
        out[i] = x * T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
    }
    ensure_finite(out, "gelu");
    return Tensor<T>::make_op(a.shape(), std::move(out), "gelu", {a},
                              [a, n](TensorNode<T>& self) mutable {
                                  if (!a.requires_grad()) return;
                                  auto& g = a.mut_grad();
                                  for (std::int64_t i = 0; i < n; ++i) {
                                      const T x = a.data()[i];
                                      const T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
                                      const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x * x);
                                      g[i] += self.grad[i] * (cdf + x * pdf);
                                  }
                              });
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& a) {
    const std::int64_t n = a.numel();
    T s = T(0);
    for (std::int64_t i = 0; i < n; ++i) s += a.data()[i];
    std::vector<T> out{s};
    ensure_finite(out, "sum");
    return Tensor<T>::make_op({1}, std::move(out), "sum", {a},
                              [a, n](TensorNode<T>& self) mutable {
                                  if (!a.requires_grad()) return;
                                  auto& g = a.mut_grad();
                                  const T up = self.grad[0];
                                  for (std::int64_t i = 0; i < n; ++i) g[i] += up;
                              });
}

// ---------------------------------------------------------------------------
// Shape plumbing
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> reshape(const Tensor<T>& a, const Shape& new_shape) {
    if (shape_numel(new_shape) != a.numel()) {
        throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                             shape_str(new_shape));
    }
    std::vector<T> out(a.data(), a.data() + a.numel());
    const std::int64_t n = a.numel();
    return Tensor<T>::make_op(new_shape, std::move(out), "reshape", {a},
                              [a, n](TensorNode<T>& self) mutable {
                                  if (a.requires_grad()) a.node()->accumulate(self.grad.data(), n);
                              });
}

template <class T>
Tensor<T> transpose2d(const Tensor<T>& a) {
    if (a.rank() != 2) throw DimensionError("transpose2d expects rank 2, got " + shape_str(a.shape()));
    const std::int64_t m = a.extent(0), n = a.extent(1);
    std::vector<T> out(static_cast<std::size_t>(m * n));
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) out[j * m + i] = a.data()[i * n + j];
    return Tensor<T>::make_op({n, m}, std::move(out), "transpose2d", {a},
                              [a, m, n](TensorNode<T>& self) mutable {
                                  if (!a.requires_grad()) return;
                                  auto& g = a.mut_grad();
                                  for (std::int64_t i = 0; i < m; ++i)
                                      for (std::int64_t j = 0; j < n; ++j)
                                          g[i * n + j] += self.grad[j * m + i];
                              });
}

/// Stack two row-major matrices with equal column counts, a on top.
template <class T>
Tensor<T> concat_rows(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(1)) {
        throw DimensionError("concat_rows: incompatible shapes " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
    const std::int64_t ra = a.extent(0), rb = b.extent(0), c = a.extent(1);
    std::vector<T> out(static_cast<std::size_t>((ra + rb) * c));
    std::memcpy(out.data(), a.data(), sizeof(T) * static_cast<std::size_t>(ra * c));
    std::memcpy(out.data() + ra * c, b.data(), sizeof(T) * static_cast<std::size_t>(rb * c));
    return Tensor<T>::make_op({ra + rb, c}, std::move(out), "concat_rows", {a, b},
                              [a, b, ra, rb, c](TensorNode<T>& self) mutable {
                                  if (a.requires_grad()) a.node()->accumulate(self.grad.data(), ra * c);
                                  if (b.requires_grad())
                                      b.node()->accumulate(self.grad.data() + ra * c, rb * c);
                              });
}

/// Rows [begin, end) of a rank-2 tensor.
template <class T>
Tensor<T> slice_rows(const Tensor<T>& a, std::int64_t begin, std::int64_t end) {
    if (a.rank() != 2) throw DimensionError("slice_rows expects rank 2");
    if (begin < 0 || end > a.extent(0) || begin >= end) {
        throw DimensionError("slice_rows: range [" + std::to_string(begin) + "," +
                             std::to_string(end) + ") out of bounds for " + shape_str(a.shape()));
    }
    const std::int64_t c = a.extent(1), rows = end - begin;
    std::vector<T> out(a.data() + begin * c, a.data() + end * c);
    return Tensor<T>::make_op({rows, c}, std::move(out), "slice_rows", {a},
                              [a, begin, rows, c](TensorNode<T>& self) mutable {
                                  if (!a.requires_grad()) return;
                                  auto& g = a.mut_grad();
                                  for (std::int64_t i = 0; i < rows * c; ++i)
                                      g[begin * c + i] += self.grad[i];
                              });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

// Matrix product for rank 2..3 operands. Rank-3 operands carry a leading
// batch extent which must agree or broadcast from 1 (a rank-2 operand counts
// as batch 1). Gradients: da = g*b^T, db = a^T*g, summed over broadcast
// batches.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() < 2 || a.rank() > 3 || b.rank() < 2 || b.rank() > 3) {
        throw DimensionError("matmul: ranks must be 2 or 3, got " + shape_str(a.shape()) +
                             " and " + shape_str(b.shape()));
    }
    const std::int64_t ba = a.rank() == 3 ? a.extent(0) : 1;
    const std::int64_t bb = b.rank() == 3 ? b.extent(0) : 1;
    const std::int64_t m = a.extent(a.rank() - 2), k = a.extent(a.rank() - 1);
    const std::int64_t k2 = b.extent(b.rank() - 2), n = b.extent(b.rank() - 1);
    if (k != k2 || (ba != bb && ba != 1 && bb != 1)) {
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    }
    const std::int64_t batch = std::max(ba, bb);
    std::vector<T> out(static_cast<std::size_t>(batch * m * n));
    for (std::int64_t i = 0; i < batch; ++i) {
        detail::gemm_nn(a.data() + (ba == 1 ? 0 : i * m * k), b.data() + (bb == 1 ? 0 : i * k * n),
                        out.data() + i * m * n, m, k, n);
    }
    ensure_finite(out, "matmul");
    Shape out_shape = (a.rank() == 3 || b.rank() == 3) ? Shape{batch, m, n} : Shape{m, n};
    return Tensor<T>::make_op(
        std::move(out_shape), std::move(out), "matmul", {a, b},
        [a, b, ba, bb, batch, m, k, n](TensorNode<T>& self) mutable {
            if (a.requires_grad()) {
                auto& ga = a.mut_grad();
                for (std::int64_t i = 0; i < batch; ++i) {
                    detail::gemm_nt(self.grad.data() + i * m * n,
                                    b.data() + (bb == 1 ? 0 : i * k * n),
                                    ga.data() + (ba == 1 ? 0 : i * m * k), m, n, k, true);
                }
            }
            if (b.requires_grad()) {
                auto& gb = b.mut_grad();
                for (std::int64_t i = 0; i < batch; ++i) {
                    detail::gemm_tn(a.data() + (ba == 1 ? 0 : i * m * k),
                                    self.grad.data() + i * m * n,
                                    gb.data() + (bb == 1 ? 0 : i * k * n), k, m, n, true);
                }
            }
        });
}

/// Adds a length-D bias to every row of an M x D matrix.
template <class T>
Tensor<T> add_row_bias(const Tensor<T>& x, const Tensor<T>& bias) {
    if (x.rank() != 2 || bias.rank() != 1 || bias.extent(0) != x.extent(1)) {
        throw DimensionError("add_row_bias: " + shape_str(x.shape()) + " with bias " +
                             shape_str(bias.shape()));
    }
    const std::int64_t m = x.extent(0), d = x.extent(1);
    std::vector<T> out(static_cast<std::size_t>(m * d));
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < d; ++j) out[i * d + j] = x.data()[i * d + j] + bias.data()[j];
    ensure_finite(out, "add_row_bias");
    return Tensor<T>::make_op({m, d}, std::move(out), "add_row_bias", {x, bias},
                              [x, bias, m, d](TensorNode<T>& self) mutable {
                                  if (x.requires_grad()) x.node()->accumulate(self.grad.data(), m * d);
                                  if (bias.requires_grad()) {
                                      auto& g = bias.mut_grad();
                                      for (std::int64_t i = 0; i < m; ++i)
                                          for (std::int64_t j = 0; j < d; ++j)
                                              g[j] += self.grad[i * d + j];
                                  }
                              });
}

/// Adds a length-C bias across the spatial extent of a C x H x W map.
template <class T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& bias) {
    if (x.rank() != 3 || bias.rank() != 1 || bias.extent(0) != x.extent(0)) {
        throw DimensionError("add_channel_bias: " + shape_str(x.shape()) + " with bias " +
                             shape_str(bias.shape()));
    }
    const std::int64_t c = x.extent(0), hw = x.extent(1) * x.extent(2);
    std::vector<T> out(static_cast<std::size_t>(c * hw));
    for (std::int64_t ch = 0; ch < c; ++ch) {
        const T b = bias.data()[ch];
        for (std::int64_t i = 0; i < hw; ++i) out[ch * hw + i] = x.data()[ch * hw + i] + b;
    }
    ensure_finite(out, "add_channel_bias");
    return Tensor<T>::make_op(x.shape(), std::move(out), "add_channel_bias", {x, bias},
                              [x, bias, c, hw](TensorNode<T>& self) mutable {
                                  if (x.requires_grad()) x.node()->accumulate(self.grad.data(), c * hw);
                                  if (bias.requires_grad()) {
                                      auto& g = bias.mut_grad();
                                      for (std::int64_t ch = 0; ch < c; ++ch) {
                                          T s = T(0);
                                          for (std::int64_t i = 0; i < hw; ++i)
                                              s += self.grad[ch * hw + i];
                                          g[ch] += s;
                                      }
                                  }
                              });
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

/// Softmax over the last dimension, max-subtracted for stability.
template <class T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
    if (x.rank() < 1 || x.extent(x.rank() - 1) < 1) {
        throw DimensionError("softmax_lastdim: needs a non-empty last dimension");
    }
    const std::int64_t cols = x.extent(x.rank() - 1);
    const std::int64_t rows = x.numel() / cols;
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        if (!std::isfinite(x.data()[i]))
            throw NumericError("softmax_lastdim: non-finite input at flat index " + std::to_string(i));
    }
    std::vector<T> out(static_cast<std::size_t>(rows * cols));
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* in = x.data() + r * cols;
        T* o = out.data() + r * cols;
        T mx = in[0];
        for (std::int64_t j = 1; j < cols; ++j) mx = std::max(mx, in[j]);
        T denom = T(0);
        for (std::int64_t j = 0; j < cols; ++j) {
            o[j] = std::exp(in[j] - mx);
            denom += o[j];
        }
        for (std::int64_t j = 0; j < cols; ++j) o[j] /= denom;
    }
    std::vector<T> saved = out;
    return Tensor<T>::make_op(
        x.shape(), std::move(out), "softmax_lastdim", {x},
        [x, rows, cols, saved = std::move(saved)](TensorNode<T>& self) mutable {
            if (!x.requires_grad()) return;
            auto& g = x.mut_grad();
            for (std::int64_t r = 0; r < rows; ++r) {
                const T* w = saved.data() + r * cols;
                const T* up = self.grad.data() + r * cols;
                T dot = T(0);
                for (std::int64_t j = 0; j < cols; ++j) dot += up[j] * w[j];
                for (std::int64_t j = 0; j < cols; ++j) g[r * cols + j] += w[j] * (up[j] - dot);
            }
        });
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

namespace detail {

// col has shape (C_in*k*k) x (H_out*W_out); zero pad outside the input.
template <class T>
void im2col(const T* x, std::int64_t c_in, std::int64_t h, std::int64_t w, std::int64_t k,
            std::int64_t stride, std::int64_t pad, std::int64_t h_out, std::int64_t w_out,
            T* col) {
    const std::int64_t plane = h * w;
    for (std::int64_t ci = 0; ci < c_in; ++ci) {
        for (std::int64_t kh = 0; kh < k; ++kh) {
            for (std::int64_t kw = 0; kw < k; ++kw) {
                T* dst = col + ((ci * k + kh) * k + kw) * (h_out * w_out);
                for (std::int64_t ho = 0; ho < h_out; ++ho) {
                    const std::int64_t hi = ho * stride - pad + kh;
                    if (hi < 0 || hi >= h) {
                        std::fill(dst + ho * w_out, dst + (ho + 1) * w_out, T(0));
                        continue;
                    }
                    const T* src_row = x + ci * plane + hi * w;
                    for (std::int64_t wo = 0; wo < w_out; ++wo) {
                        const std::int64_t wi = wo * stride - pad + kw;
                        dst[ho * w_out + wo] = (wi >= 0 && wi < w) ? src_row[wi] : T(0);
                    }
                }
            }
        }
    }
}

template <class T>
void col2im(const T* col, std::int64_t c_in, std::int64_t h, std::int64_t w, std::int64_t k,
            std::int64_t stride, std::int64_t pad, std::int64_t h_out, std::int64_t w_out,
            T* x_grad) {
    const std::int64_t plane = h * w;
    for (std::int64_t ci = 0; ci < c_in; ++ci) {
        for (std::int64_t kh = 0; kh < k; ++kh) {
            for (std::int64_t kw = 0; kw < k; ++kw) {
                const T* src = col + ((ci * k + kh) * k + kw) * (h_out * w_out);
                for (std::int64_t ho = 0; ho < h_out; ++ho) {
                    const std::int64_t hi = ho * stride - pad + kh;
                    if (hi < 0 || hi >= h) continue;
                    T* dst_row = x_grad + ci * plane + hi * w;
                    for (std::int64_t wo = 0; wo < w_out; ++wo) {
                        const std::int64_t wi = wo * stride - pad + kw;
                        if (wi >= 0 && wi < w) dst_row[wi] += src[ho * w_out + wo];
                    }
                }
            }
        }
    }
}

}  // namespace detail

// 2D cross-correlation of a single C_in x H x W input with a
// C_out x C_in x k x k kernel. Runs as im2col + GEMM.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, std::int64_t stride,
                 std::int64_t pad) {
    if (x.rank() != 3 || kernel.rank() != 4) {
        throw DimensionError("conv2d: expects input CxHxW and kernel OxCxkxk, got " +
                             shape_str(x.shape()) + " and " + shape_str(kernel.shape()));
    }
    if (stride <= 0) throw DimensionError("conv2d: stride must be positive");
    if (pad < 0) throw DimensionError("conv2d: pad must be non-negative");
    if (kernel.extent(2) != kernel.extent(3)) {
        throw DimensionError("conv2d: kernel must be square, got " + shape_str(kernel.shape()));
    }
    const std::int64_t c_in = x.extent(0), h = x.extent(1), w = x.extent(2);
    const std::int64_t c_out = kernel.extent(0), k = kernel.extent(2);
    if (kernel.extent(1) != c_in) {
        throw DimensionError("conv2d: input channels " + std::to_string(c_in) +
                             " do not match kernel " + shape_str(kernel.shape()));
    }
    if (h + 2 * pad < k || w + 2 * pad < k) {
        throw DimensionError("conv2d: kernel " + std::to_string(k) + " larger than padded input " +
                             shape_str(x.shape()) + " with pad " + std::to_string(pad));
    }
    const std::int64_t h_out = (h + 2 * pad - k) / stride + 1;
    const std::int64_t w_out = (w + 2 * pad - k) / stride + 1;

    std::vector<T> col(static_cast<std::size_t>(c_in * k * k * h_out * w_out));
    detail::im2col(x.data(), c_in, h, w, k, stride, pad, h_out, w_out, col.data());

    std::vector<T> out(static_cast<std::size_t>(c_out * h_out * w_out));
    detail::gemm_nn(kernel.data(), col.data(), out.data(), c_out, c_in * k * k, h_out * w_out);
    ensure_finite(out, "conv2d");

    return Tensor<T>::make_op(
        {c_out, h_out, w_out}, std::move(out), "conv2d", {x, kernel},
        [x, kernel, col = std::move(col), c_in, h, w, c_out, k, stride, pad, h_out,
         w_out](TensorNode<T>& self) mutable {
            const std::int64_t patch = c_in * k * k, area = h_out * w_out;
            if (kernel.requires_grad()) {
                detail::gemm_nt(self.grad.data(), col.data(), kernel.mut_grad().data(), c_out, area,
                                patch, true);
            }
            if (x.requires_grad()) {
                std::vector<T> dcol(static_cast<std::size_t>(patch * area));
                detail::gemm_tn(kernel.data(), self.grad.data(), dcol.data(), patch, c_out, area);
                detail::col2im(dcol.data(), c_in, h, w, k, stride, pad, h_out, w_out,
                               x.mut_grad().data());
            }
        });
}

// ---------------------------------------------------------------------------
// Bilinear resize
// ---------------------------------------------------------------------------

namespace detail {

struct ResizeAxis {
    std::int64_t lo, hi;
    double w_hi;
};

inline void resize_axis(std::int64_t in, std::int64_t out, std::vector<ResizeAxis>& ax) {
    ax.resize(static_cast<std::size_t>(out));
    // Corner-aligned: output corners sample input corners exactly; a single
    // output sample reads coordinate 0.
    const double step = out > 1 ? static_cast<double>(in - 1) / static_cast<double>(out - 1) : 0.0;
    for (std::int64_t i = 0; i < out; ++i) {
        double pos = step * static_cast<double>(i);
        if (pos < 0) pos = 0;
        if (pos > static_cast<double>(in - 1)) pos = static_cast<double>(in - 1);
        auto lo = static_cast<std::int64_t>(pos);
        if (lo > in - 2) lo = std::max<std::int64_t>(0, in - 2);
        ax[i].lo = lo;
        ax[i].hi = std::min(lo + 1, in - 1);
        ax[i].w_hi = pos - static_cast<double>(lo);
    }
}

}  // namespace detail

// Corner-aligned bilinear resampling of a C x H x W map; reproduces any
// per-channel bilinear function exactly. Edge replication outside the grid.
template <class T>
Tensor<T> bilinear_resize(const Tensor<T>& x, std::int64_t out_h, std::int64_t out_w) {
    if (x.rank() != 3) throw DimensionError("bilinear_resize expects CxHxW, got " + shape_str(x.shape()));
    if (out_h < 1 || out_w < 1) throw DimensionError("bilinear_resize: target extents must be >= 1");
    const std::int64_t c = x.extent(0), h = x.extent(1), w = x.extent(2);
    std::vector<detail::ResizeAxis> ay, axs;
    detail::resize_axis(h, out_h, ay);
    detail::resize_axis(w, out_w, axs);

    std::vector<T> out(static_cast<std::size_t>(c * out_h * out_w));
    for (std::int64_t ch = 0; ch < c; ++ch) {
        const T* plane = x.data() + ch * h * w;
        T* o = out.data() + ch * out_h * out_w;
        for (std::int64_t i = 0; i < out_h; ++i) {
            const auto& ry = ay[i];
            const T wy1 = static_cast<T>(ry.w_hi), wy0 = T(1) - wy1;
            for (std::int64_t j = 0; j < out_w; ++j) {
                const auto& rx = axs[j];
                const T wx1 = static_cast<T>(rx.w_hi), wx0 = T(1) - wx1;
                o[i * out_w + j] = wy0 * (wx0 * plane[ry.lo * w + rx.lo] + wx1 * plane[ry.lo * w + rx.hi]) +
                                   wy1 * (wx0 * plane[ry.hi * w + rx.lo] + wx1 * plane[ry.hi * w + rx.hi]);
            }
        }
    }
    ensure_finite(out, "bilinear_resize");
    return Tensor<T>::make_op(
        {c, out_h, out_w}, std::move(out), "bilinear_resize", {x},
        [x, ay = std::move(ay), axs = std::move(axs), c, h, w, out_h, out_w](TensorNode<T>& self) mutable {
            if (!x.requires_grad()) return;
            auto& g = x.mut_grad();
            for (std::int64_t ch = 0; ch < c; ++ch) {
                T* gp = g.data() + ch * h * w;
                const T* up = self.grad.data() + ch * out_h * out_w;
                for (std::int64_t i = 0; i < out_h; ++i) {
                    const auto& ry = ay[i];
                    const T wy1 = static_cast<T>(ry.w_hi), wy0 = T(1) - wy1;
                    for (std::int64_t j = 0; j < out_w; ++j) {
                        const auto& rx = axs[j];
                        const T wx1 = static_cast<T>(rx.w_hi), wx0 = T(1) - wx1;
                        const T u = up[i * out_w + j];
                        gp[ry.lo * w + rx.lo] += wy0 * wx0 * u;
                        gp[ry.lo * w + rx.hi] += wy0 * wx1 * u;
                        gp[ry.hi * w + rx.lo] += wy1 * wx0 * u;
                        gp[ry.hi * w + rx.hi] += wy1 * wx1 * u;
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Masked multi-head attention
// ---------------------------------------------------------------------------

// Scaled dot-product attention over pre-projected q/k/v with an optional
// attend/block mask, heads concatenated then linearly projected by out_w
// (+ out_b). Blocked key/value entries are skipped outright, so a query row's
// output is bitwise independent of everything its mask row blocks. A query
// row with no attendable key is a configuration error, never NaN.
template <class T>
Tensor<T> masked_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           const Mask* mask, std::int64_t heads, const Tensor<T>& out_w,
                           const Tensor<T>& out_b) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) {
        throw DimensionError("masked_attention: q/k/v must be rank 2");
    }
    const std::int64_t mq = q.extent(0), d = q.extent(1), mk = k.extent(0);
    if (k.extent(1) != d || v.extent(1) != d || v.extent(0) != mk) {
        throw DimensionError("masked_attention: q " + shape_str(q.shape()) + ", k " +
                             shape_str(k.shape()) + ", v " + shape_str(v.shape()) +
                             " widths/rows do not line up");
    }
    if (heads <= 0 || d % heads != 0) {
        throw DimensionError("masked_attention: width " + std::to_string(d) +
                             " not divisible by heads " + std::to_string(heads));
    }
    if (out_w.rank() != 2 || out_w.extent(0) != d || out_w.extent(1) != d ||
        out_b.rank() != 1 || out_b.extent(0) != d) {
        throw DimensionError("masked_attention: projection must be DxD with length-D bias");
    }
    if (mask && (mask->rows != mq || mask->cols != mk)) {
        throw DimensionError("masked_attention: mask is " + std::to_string(mask->rows) + "x" +
                             std::to_string(mask->cols) + ", expected " + std::to_string(mq) + "x" +
                             std::to_string(mk));
    }
    if (mask) {
        for (std::int64_t i = 0; i < mq; ++i) {
            bool any = false;
            for (std::int64_t j = 0; j < mk && !any; ++j) any = mask->at(i, j);
            if (!any)
                throw ConfigError("masked_attention: query row " + std::to_string(i) +
                                  " is fully masked");
        }
    }

    const std::int64_t dh = d / heads;
    const T scl = T(1) / std::sqrt(static_cast<T>(dh));

    // weights[h][i*mk + j]; blocked entries stay exactly zero.
    std::vector<T> weights(static_cast<std::size_t>(heads * mq * mk), T(0));
    std::vector<T> ctx(static_cast<std::size_t>(mq * d), T(0));
    std::vector<T> logits(static_cast<std::size_t>(mk));
    for (std::int64_t hd = 0; hd < heads; ++hd) {
        const std::int64_t off = hd * dh;
        T* wh = weights.data() + hd * mq * mk;
        for (std::int64_t i = 0; i < mq; ++i) {
            const T* qi = q.data() + i * d + off;
            T mx = -std::numeric_limits<T>::infinity();
            for (std::int64_t j = 0; j < mk; ++j) {
                if (mask && !mask->at(i, j)) continue;
                const T* kj = k.data() + j * d + off;
                T dot = T(0);
                for (std::int64_t t = 0; t < dh; ++t) dot += qi[t] * kj[t];
                logits[j] = dot * scl;
                mx = std::max(mx, logits[j]);
            }
            T denom = T(0);
            for (std::int64_t j = 0; j < mk; ++j) {
                if (mask && !mask->at(i, j)) continue;
                const T e = std::exp(logits[j] - mx);
                wh[i * mk + j] = e;
                denom += e;
            }
            T* ci = ctx.data() + i * d + off;
            for (std::int64_t j = 0; j < mk; ++j) {
                if (mask && !mask->at(i, j)) continue;
                const T wt = wh[i * mk + j] / denom;
                wh[i * mk + j] = wt;
                const T* vj = v.data() + j * d + off;
                for (std::int64_t t = 0; t < dh; ++t) ci[t] += wt * vj[t];
            }
        }
    }

    std::vector<T> out(static_cast<std::size_t>(mq * d));
    detail::gemm_nn(ctx.data(), out_w.data(), out.data(), mq, d, d);
    for (std::int64_t i = 0; i < mq; ++i)
        for (std::int64_t j = 0; j < d; ++j) out[i * d + j] += out_b.data()[j];
    ensure_finite(out, "masked_attention");

    std::shared_ptr<const Mask> mask_copy = mask ? std::make_shared<Mask>(*mask) : nullptr;
    return Tensor<T>::make_op(
        {mq, d}, std::move(out), "masked_attention", {q, k, v, out_w, out_b},
        [q, k, v, out_w, out_b, mask_copy, weights = std::move(weights), ctx = std::move(ctx), mq,
         mk, d, dh, heads, scl](TensorNode<T>& self) mutable {
            // Projection backward.
            std::vector<T> dctx(static_cast<std::size_t>(mq * d));
            detail::gemm_nt(self.grad.data(), out_w.data(), dctx.data(), mq, d, d);
            if (out_w.requires_grad()) {
                detail::gemm_tn(ctx.data(), self.grad.data(), out_w.mut_grad().data(), d, mq, d,
                                true);
            }
            if (out_b.requires_grad()) {
                auto& gb = out_b.mut_grad();
                for (std::int64_t i = 0; i < mq; ++i)
                    for (std::int64_t j = 0; j < d; ++j) gb[j] += self.grad[i * d + j];
            }
            const bool need_q = q.requires_grad(), need_k = k.requires_grad(),
                       need_v = v.requires_grad();
            if (!(need_q || need_k || need_v)) return;
            if (need_q) q.node()->ensure_grad();
            if (need_k) k.node()->ensure_grad();
            if (need_v) v.node()->ensure_grad();
            const Mask* msk = mask_copy.get();
            std::vector<T> dw(static_cast<std::size_t>(mk));
            for (std::int64_t hd = 0; hd < heads; ++hd) {
                const std::int64_t off = hd * dh;
                const T* wh = weights.data() + hd * mq * mk;
                for (std::int64_t i = 0; i < mq; ++i) {
                    const T* du = dctx.data() + i * d + off;
                    // d(weight_ij) and the softmax row Jacobian, restricted to
                    // attendable entries.
                    T dot = T(0);
                    for (std::int64_t j = 0; j < mk; ++j) {
                        if (msk && !msk->at(i, j)) continue;
                        const T* vj = v.data() + j * d + off;
                        T s = T(0);
                        for (std::int64_t t = 0; t < dh; ++t) s += du[t] * vj[t];
                        dw[j] = s;
                        dot += s * wh[i * mk + j];
                        if (need_v) {
                            T* gv = v.node()->grad.data() + j * d + off;
                            const T wt = wh[i * mk + j];
                            for (std::int64_t t = 0; t < dh; ++t) gv[t] += wt * du[t];
                        }
                    }
                    if (!(need_q || need_k)) continue;
                    T* gq = need_q ? q.node()->grad.data() + i * d + off : nullptr;
                    const T* qi = q.data() + i * d + off;
                    for (std::int64_t j = 0; j < mk; ++j) {
                        if (msk && !msk->at(i, j)) continue;
                        const T dlogit = wh[i * mk + j] * (dw[j] - dot) * scl;
                        if (dlogit == T(0)) continue;
                        const T* kj = k.data() + j * d + off;
                        if (need_q)
                            for (std::int64_t t = 0; t < dh; ++t) gq[t] += dlogit * kj[t];
                        if (need_k) {
                            T* gk = k.node()->grad.data() + j * d + off;
                            for (std::int64_t t = 0; t < dh; ++t) gk[t] += dlogit * qi[t];
                        }
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

// Per-row normalization of an M x D matrix with affine gamma/beta of length D.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
    if (x.rank() != 2 || gamma.rank() != 1 || beta.rank() != 1 ||
        gamma.extent(0) != x.extent(1) || beta.extent(0) != x.extent(1)) {
        throw DimensionError("layer_norm: x " + shape_str(x.shape()) + " with gamma " +
                             shape_str(gamma.shape()) + ", beta " + shape_str(beta.shape()));
    }
    const std::int64_t m = x.extent(0), d = x.extent(1);
    std::vector<T> out(static_cast<std::size_t>(m * d));
    std::vector<T> xhat(static_cast<std::size_t>(m * d));
    std::vector<T> inv_std(static_cast<std::size_t>(m));
    for (std::int64_t i = 0; i < m; ++i) {
        const T* row = x.data() + i * d;
        T mean = T(0);
        for (std::int64_t j = 0; j < d; ++j) mean += row[j];
        mean /= static_cast<T>(d);
        T var = T(0);
        for (std::int64_t j = 0; j < d; ++j) {
            const T c = row[j] - mean;
            var += c * c;
        }
        var /= static_cast<T>(d);
        const T istd = T(1) / std::sqrt(var + eps);
        inv_std[i] = istd;
        for (std::int64_t j = 0; j < d; ++j) {
            const T xh = (row[j] - mean) * istd;
            xhat[i * d + j] = xh;
            out[i * d + j] = xh * gamma.data()[j] + beta.data()[j];
        }
    }
    ensure_finite(out, "layer_norm");
    return Tensor<T>::make_op(
        x.shape(), std::move(out), "layer_norm", {x, gamma, beta},
        [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), m,
         d](TensorNode<T>& self) mutable {
            if (beta.requires_grad()) {
                auto& gb = beta.mut_grad();
                for (std::int64_t i = 0; i < m; ++i)
                    for (std::int64_t j = 0; j < d; ++j) gb[j] += self.grad[i * d + j];
            }
            if (gamma.requires_grad()) {
                auto& gg = gamma.mut_grad();
                for (std::int64_t i = 0; i < m; ++i)
                    for (std::int64_t j = 0; j < d; ++j)
                        gg[j] += self.grad[i * d + j] * xhat[i * d + j];
            }
            if (x.requires_grad()) {
                auto& gx = x.mut_grad();
                for (std::int64_t i = 0; i < m; ++i) {
                    T sum_dy = T(0), sum_dy_xh = T(0);
                    for (std::int64_t j = 0; j < d; ++j) {
                        const T dy = self.grad[i * d + j] * gamma.data()[j];
                        sum_dy += dy;
                        sum_dy_xh += dy * xhat[i * d + j];
                    }
                    const T inv_d = T(1) / static_cast<T>(d);
                    for (std::int64_t j = 0; j < d; ++j) {
                        const T dy = self.grad[i * d + j] * gamma.data()[j];
                        gx[i * d + j] += inv_std[i] *
                                         (dy - inv_d * sum_dy - xhat[i * d + j] * inv_d * sum_dy_xh);
                    }
                }
            }
        });
}

// Per-channel normalization of a C x H x W map over its spatial extent, with
// affine gamma/beta of length C. Statistics come from the map itself; there
// is no running state.
template <class T>
Tensor<T> channel_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                       T eps = T(1e-5)) {
    if (x.rank() != 3 || gamma.rank() != 1 || beta.rank() != 1 ||
        gamma.extent(0) != x.extent(0) || beta.extent(0) != x.extent(0)) {
        throw DimensionError("channel_norm: x " + shape_str(x.shape()) + " with gamma " +
                             shape_str(gamma.shape()) + ", beta " + shape_str(beta.shape()));
    }
    const std::int64_t c = x.extent(0), hw = x.extent(1) * x.extent(2);
    std::vector<T> out(static_cast<std::size_t>(c * hw));
    std::vector<T> xhat(static_cast<std::size_t>(c * hw));
    std::vector<T> inv_std(static_cast<std::size_t>(c));
    for (std::int64_t ch = 0; ch < c; ++ch) {
        const T* plane = x.data() + ch * hw;
        T mean = T(0);
        for (std::int64_t i = 0; i < hw; ++i) mean += plane[i];
        mean /= static_cast<T>(hw);
        T var = T(0);
        for (std::int64_t i = 0; i < hw; ++i) {
            const T d = plane[i] - mean;
            var += d * d;
        }
        var /= static_cast<T>(hw);
        const T istd = T(1) / std::sqrt(var + eps);
        inv_std[ch] = istd;
        const T g = gamma.data()[ch], b = beta.data()[ch];
        for (std::int64_t i = 0; i < hw; ++i) {
            const T xh = (plane[i] - mean) * istd;
            xhat[ch * hw + i] = xh;
            out[ch * hw + i] = xh * g + b;
        }
    }
    ensure_finite(out, "channel_norm");
    return Tensor<T>::make_op(
        x.shape(), std::move(out), "channel_norm", {x, gamma, beta},
        [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), c,
         hw](TensorNode<T>& self) mutable {
            for (std::int64_t ch = 0; ch < c; ++ch) {
                const T* up = self.grad.data() + ch * hw;
                const T* xh = xhat.data() + ch * hw;
                T sum_dy = T(0), sum_dy_xh = T(0);
                for (std::int64_t i = 0; i < hw; ++i) {
                    sum_dy += up[i];
                    sum_dy_xh += up[i] * xh[i];
                }
                if (beta.requires_grad()) beta.mut_grad()[ch] += sum_dy;
                if (gamma.requires_grad()) gamma.mut_grad()[ch] += sum_dy_xh;
                if (x.requires_grad()) {
                    auto& gx = x.mut_grad();
                    const T g = gamma.data()[ch];
                    const T inv_hw = T(1) / static_cast<T>(hw);
                    for (std::int64_t i = 0; i < hw; ++i) {
                        gx[ch * hw + i] += inv_std[ch] * g *
                                           (up[i] - inv_hw * sum_dy - xh[i] * inv_hw * sum_dy_xh);
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Layout helpers for attention over feature maps
// ---------------------------------------------------------------------------

/// C x H x W -> (H*W) x C token layout.
template <class T>
Tensor<T> map_to_tokens(const Tensor<T>& x) {
    if (x.rank() != 3) throw DimensionError("map_to_tokens expects CxHxW");
    const std::int64_t c = x.extent(0);
    return transpose2d(reshape(x, {c, x.extent(1) * x.extent(2)}));
}

/// (H*W) x C tokens -> C x H x W map layout.
template <class T>
Tensor<T> tokens_to_map(const Tensor<T>& t, std::int64_t h, std::int64_t w) {
    if (t.rank() != 2 || t.extent(0) != h * w) {
        throw DimensionError("tokens_to_map: " + shape_str(t.shape()) + " does not cover " +
                             std::to_string(h) + "x" + std::to_string(w));
    }
    return reshape(transpose2d(t), {t.extent(1), h, w});
}

}  // namespace mdepth::ops
