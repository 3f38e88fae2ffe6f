// SPDX-License-Identifier: Apache-2.0
//
// Numerical kernels behind the differentiable ops.
//
// Every kernel exists twice: `serial::` is the plain reference loop kept for
// testing, `omp::` is the OpenMP version used by the ops. The omp versions
// split work so that each output element is always produced by the same
// sequence of floating-point operations, whatever the thread count.
#pragma once

#include <cstddef>
#include <span>

namespace openus::kernels {

/// Sizes of one selective-scan problem: sequence length T, channel count D,
/// state size N.
struct ScanDims {
  std::size_t length = 0;
  std::size_t channels = 0;
  std::size_t states = 0;
};

/// Inputs of a selective scan. u is [T x D], delta [T], a [N] (diagonal of
/// the state matrix, negative), b and c are [T x N].
template <typename T>
struct ScanInputs {
  ScanDims dims;
  std::span<const T> u;
  std::span<const T> delta;
  std::span<const T> a;
  std::span<const T> b;
  std::span<const T> c;
};

/// Gradients of a selective scan, same layout as ScanInputs.
template <typename T>
struct ScanGrads {
  std::span<T> u;
  std::span<T> delta;
  std::span<T> a;
  std::span<T> b;
  std::span<T> c;
};

/// How the token-to-token matrix of the state-space model is formed.
/// weighted: (C ⊙ w)(B / w)^T masked causally, i.e. the decay-aware form
/// whose product with delta ⊙ u reproduces the scan. plain: C B^T masked.
enum class AttentionForm { weighted, plain };

namespace serial {

/// c = op(a) * op(b) (or c += when accumulate). a is m x k (k x m when
/// trans_a), b is k x n (n x k when trans_b).
template <typename T>
void gemm(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m,
          std::size_t k, std::size_t n, bool trans_a, bool trans_b, bool accumulate);

/// y [T x D]; states [T x N x D] holds h_i after step i.
template <typename T>
void scan_forward(const ScanInputs<T>& in, std::span<T> y, std::span<T> states);

template <typename T>
void scan_backward(const ScanInputs<T>& in, std::span<const T> states, std::span<const T> gy,
                   const ScanGrads<T>& out);

/// att [T x T]; entries above the diagonal are zero.
template <typename T>
void ssm_attention(const ScanInputs<T>& in, AttentionForm form, std::span<T> att);

template <typename T>
void ssm_attention_backward(const ScanInputs<T>& in, AttentionForm form, std::span<const T> gatt,
                            const ScanGrads<T>& out);

}  // namespace serial

namespace omp {

template <typename T>
void gemm(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m,
          std::size_t k, std::size_t n, bool trans_a, bool trans_b, bool accumulate);

template <typename T>
void scan_forward(const ScanInputs<T>& in, std::span<T> y, std::span<T> states);

template <typename T>
void scan_backward(const ScanInputs<T>& in, std::span<const T> states, std::span<const T> gy,
                   const ScanGrads<T>& out);

template <typename T>
void ssm_attention(const ScanInputs<T>& in, AttentionForm form, std::span<T> att);

template <typename T>
void ssm_attention_backward(const ScanInputs<T>& in, AttentionForm form, std::span<const T> gatt,
                            const ScanGrads<T>& out);

}  // namespace omp

}  // namespace openus::kernels
