// SPDX-License-Identifier: Apache-2.0
//
// The closed set of differentiable operations. Broadcasting is limited to
// scalar-vs-tensor and equal shapes; anything else goes through an explicit
// reshape, gather or tile.
#pragma once

#include <cstddef>
#include <vector>

#include "openus/kernels.hpp"
#include "openus/tensor.hpp"

namespace openus {

using kernels::AttentionForm;

enum class BinaryOp { add, sub, mul, div };
enum class UnaryOp { exp, log, neg };
enum class ReduceOp { sum, mean, max };

template <typename T>
Tensor<T> elementwise(BinaryOp op, const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> elementwise(UnaryOp op, const Tensor<T>& a);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(BinaryOp::add, a, b); }
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(BinaryOp::sub, a, b); }
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(BinaryOp::mul, a, b); }
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(BinaryOp::div, a, b); }
template <typename T>
Tensor<T> exp(const Tensor<T>& a) { return elementwise(UnaryOp::exp, a); }
template <typename T>
Tensor<T> log(const Tensor<T>& a) { return elementwise(UnaryOp::log, a); }
template <typename T>
Tensor<T> neg(const Tensor<T>& a) { return elementwise(UnaryOp::neg, a); }

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s);
template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s);

/// x * sigmoid(x).
template <typename T>
Tensor<T> silu(const Tensor<T>& x);
/// log(1 + exp(x)), evaluated without overflow.
template <typename T>
Tensor<T> softplus(const Tensor<T>& x);

/// [m x k] * [k x n].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
/// x [R x in] * weight [in x out] + bias [out] (bias added to every row).
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight);
template <typename T>
Tensor<T> transpose(const Tensor<T>& a);
template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape);

/// softmax(x / tau) over the last axis, max-subtracted.
template <typename T>
Tensor<T> softmax_t(const Tensor<T>& x, T tau);
/// log(softmax(x / tau)) over the last axis.
template <typename T>
Tensor<T> log_softmax_t(const Tensor<T>& x, T tau);

/// Normalizes each last-axis row to zero mean / unit variance, then applies
/// gamma and beta.
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    T eps = T(1e-5));

/// Reduces over the listed axes (removed from the result shape; a full
/// reduction yields shape [1]). max routes the gradient to the first
/// maximal element.
template <typename T>
Tensor<T> reduce(ReduceOp op, const Tensor<T>& x, const std::vector<int>& axes);
template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);

/// Selects along axis 0: out[i, ...] = x[index[i], ...]. Indices may repeat.
template <typename T>
Tensor<T> gather(const Tensor<T>& x, const std::vector<std::size_t>& index);

/// Concatenates along an axis; all other dimensions must agree.
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);

template <typename T>
Tensor<T> cumsum(const Tensor<T>& x, std::size_t axis);
template <typename T>
Tensor<T> cumprod(const Tensor<T>& x, std::size_t axis);

/// Zero-order-hold selective scan. u [T x D], delta [T] (> 0), a [N],
/// b and c [T x N]; returns y [T x D] with
///   h_i = exp(delta_i a) ⊙ h_{i-1} + delta_i b_i u_i^T,  y_i = c_i^T h_i.
template <typename T>
Tensor<T> selective_scan(const Tensor<T>& u, const Tensor<T>& delta, const Tensor<T>& a,
                         const Tensor<T>& b, const Tensor<T>& c);

/// The [T x T] causal token-mixing matrix of the same model. With the
/// weighted form, matmul(result, delta ⊙ u) equals selective_scan.
template <typename T>
Tensor<T> ssm_attention(const Tensor<T>& delta, const Tensor<T>& a, const Tensor<T>& b,
                        const Tensor<T>& c, AttentionForm form = AttentionForm::weighted);

// Helpers composed from the ops above.

/// [n] or [1 x n] row repeated to [rows x n].
template <typename T>
Tensor<T> tile_rows(const Tensor<T>& row, std::size_t rows);
/// [n] column repeated to [n x cols].
template <typename T>
Tensor<T> tile_cols(const Tensor<T>& column, std::size_t cols);
/// Each row divided by its l2 norm (sqrt(sum x^2 + eps)).
template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x, T eps = T(1e-12));

}  // namespace openus
