// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

// Dense kernels behind the transformer. Every kernel exists twice: the
// OpenMP version in finsent::kernels and a plain loop nest in
// finsent::kernels::serial. Both accumulate each output element in the
// same order, so they agree bit for bit regardless of thread count.
//
// All matrices are row-major. Instantiated for float and double.

namespace finsent::kernels {

/// c[m x n] = a[m x k] * b[k x n] (+ bias[n] when non-empty).
template <class T>
void matmul(std::span<const T> a, std::span<const T> b, std::span<const T> bias, std::span<T> c, std::size_t m,
            std::size_t k, std::size_t n);

/// da[m x k] += dc[m x n] * b^T, with b of shape k x n.
template <class T>
void matmul_backward_input(std::span<const T> dc, std::span<const T> b, std::span<T> da, std::size_t m,
                           std::size_t k, std::size_t n);

/// db[k x n] += a^T * dc and dbias[n] += column sums of dc (skipped when
/// dbias is empty).
template <class T>
void matmul_backward_weight(std::span<const T> a, std::span<const T> dc, std::span<T> db, std::span<T> dbias,
                            std::size_t m, std::size_t k, std::size_t n);

/// Row-wise layer norm, eps = 1e-5. Saves mean and 1/std per row.
template <class T>
void layernorm_forward(std::span<const T> x, std::span<const T> gain, std::span<const T> offset, std::span<T> y,
                       std::span<T> mean, std::span<T> rstd, std::size_t rows, std::size_t d);

/// dx += dL/dx, dgain += dL/dgain, doffset += dL/doffset.
template <class T>
void layernorm_backward(std::span<const T> dy, std::span<const T> x, std::span<const T> gain,
                        std::span<const T> mean, std::span<const T> rstd, std::span<T> dx, std::span<T> dgain,
                        std::span<T> doffset, std::size_t rows, std::size_t d);

/// tanh-approximated GELU.
template <class T>
void gelu_forward(std::span<const T> x, std::span<T> y);

/// dx = gelu'(x) * dy (overwrites dx).
template <class T>
void gelu_backward(std::span<const T> x, std::span<const T> dy, std::span<T> dx);

/// Multi-head scaled dot-product attention over q, k, v of shape t x d
/// (head h owns columns [h*d/heads, (h+1)*d/heads)). mask is t x t with
/// mask[i*t + j] != 0 when query i may read key j; every row must allow
/// at least one key. Writes probs (heads x t x t, zero where masked) and
/// out (t x d).
template <class T>
void attention_forward(std::span<const T> q, std::span<const T> k, std::span<const T> v,
                       std::span<const std::uint8_t> mask, std::span<T> probs, std::span<T> out, std::size_t t,
                       std::size_t d, std::size_t heads);

/// Overwrites dq, dk, dv.
template <class T>
void attention_backward(std::span<const T> q, std::span<const T> k, std::span<const T> v,
                        std::span<const T> probs, std::span<const std::uint8_t> mask, std::span<const T> dout,
                        std::span<T> dq, std::span<T> dk, std::span<T> dv, std::size_t t, std::size_t d,
                        std::size_t heads);

namespace serial {

template <class T>
void matmul(std::span<const T> a, std::span<const T> b, std::span<const T> bias, std::span<T> c, std::size_t m,
            std::size_t k, std::size_t n);
template <class T>
void matmul_backward_input(std::span<const T> dc, std::span<const T> b, std::span<T> da, std::size_t m,
                           std::size_t k, std::size_t n);
template <class T>
void matmul_backward_weight(std::span<const T> a, std::span<const T> dc, std::span<T> db, std::span<T> dbias,
                            std::size_t m, std::size_t k, std::size_t n);
template <class T>
void layernorm_forward(std::span<const T> x, std::span<const T> gain, std::span<const T> offset, std::span<T> y,
                       std::span<T> mean, std::span<T> rstd, std::size_t rows, std::size_t d);
template <class T>
void layernorm_backward(std::span<const T> dy, std::span<const T> x, std::span<const T> gain,
                        std::span<const T> mean, std::span<const T> rstd, std::span<T> dx, std::span<T> dgain,
                        std::span<T> doffset, std::size_t rows, std::size_t d);
template <class T>
void gelu_forward(std::span<const T> x, std::span<T> y);
template <class T>
void gelu_backward(std::span<const T> x, std::span<const T> dy, std::span<T> dx);
template <class T>
void attention_forward(std::span<const T> q, std::span<const T> k, std::span<const T> v,
                       std::span<const std::uint8_t> mask, std::span<T> probs, std::span<T> out, std::size_t t,
                       std::size_t d, std::size_t heads);
template <class T>
void attention_backward(std::span<const T> q, std::span<const T> k, std::span<const T> v,
                        std::span<const T> probs, std::span<const std::uint8_t> mask, std::span<const T> dout,
                        std::span<T> dq, std::span<T> dk, std::span<T> dv, std::size_t t, std::size_t d,
                        std::size_t heads);

}  // namespace serial

}  // namespace finsent::kernels
