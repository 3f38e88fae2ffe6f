// SPDX-License-Identifier: Apache-2.0
//
// Reference kernels: direct transcriptions of the math, one thread, no
// blocking. Used by the tests and the benchmark as the ground truth for the
// OpenMP versions.
#include <cmath>
#include <vector>

#include "openus/kernels.hpp"

namespace openus::kernels::serial {

template <typename T>
void gemm(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m,
          std::size_t k, std::size_t n, bool trans_a, bool trans_b, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T acc = 0;
      for (std::size_t p = 0; p < k; ++p) {
        const T av = trans_a ? a[p * m + i] : a[i * k + p];
        const T bv = trans_b ? b[j * k + p] : b[p * n + j];
        acc += av * bv;
      }
      c[i * n + j] = accumulate ? c[i * n + j] + acc : acc;
    }
  }
}

template <typename T>
void scan_forward(const ScanInputs<T>& in, std::span<T> y, std::span<T> states) {
  const auto [len, dim, nst] = in.dims;
  std::vector<T> h(nst * dim, T(0));
  for (std::size_t i = 0; i < len; ++i) {
    const T dt = in.delta[i];
    for (std::size_t n = 0; n < nst; ++n) {
      const T decay = std::exp(dt * in.a[n]);
      const T bn = dt * in.b[i * nst + n];
      for (std::size_t d = 0; d < dim; ++d) {
        T& hv = h[n * dim + d];
        hv = decay * hv + bn * in.u[i * dim + d];
      }
    }
    for (std::size_t d = 0; d < dim; ++d) {
      T acc = 0;
      for (std::size_t n = 0; n < nst; ++n) acc += in.c[i * nst + n] * h[n * dim + d];
      y[i * dim + d] = acc;
    }
    std::copy(h.begin(), h.end(), states.begin() + static_cast<std::ptrdiff_t>(i * nst * dim));
  }
}

template <typename T>
void scan_backward(const ScanInputs<T>& in, std::span<const T> states, std::span<const T> gy,
                   const ScanGrads<T>& out) {
  const auto [len, dim, nst] = in.dims;
  std::fill(out.u.begin(), out.u.end(), T(0));
  std::fill(out.delta.begin(), out.delta.end(), T(0));
  std::fill(out.a.begin(), out.a.end(), T(0));
  std::fill(out.b.begin(), out.b.end(), T(0));
  std::fill(out.c.begin(), out.c.end(), T(0));

  std::vector<T> dh(nst * dim, T(0));
  for (std::size_t i = len; i-- > 0;) {
    const T dt = in.delta[i];
    const T* h_cur = states.data() + i * nst * dim;
    const T* h_prev = i > 0 ? states.data() + (i - 1) * nst * dim : nullptr;
    for (std::size_t n = 0; n < nst; ++n) {
      for (std::size_t d = 0; d < dim; ++d) {
        out.c[i * nst + n] += gy[i * dim + d] * h_cur[n * dim + d];
        dh[n * dim + d] += in.c[i * nst + n] * gy[i * dim + d];
      }
    }
    for (std::size_t n = 0; n < nst; ++n) {
      const T decay = std::exp(dt * in.a[n]);
      const T bn = in.b[i * nst + n];
      for (std::size_t d = 0; d < dim; ++d) {
        const T g = dh[n * dim + d];
        const T hp = h_prev ? h_prev[n * dim + d] : T(0);
        const T ud = in.u[i * dim + d];
        out.delta[i] += g * (in.a[n] * decay * hp + bn * ud);
        out.a[n] += g * dt * decay * hp;
        out.b[i * nst + n] += g * dt * ud;
        out.u[i * dim + d] += g * dt * bn;
        dh[n * dim + d] = g * decay;
      }
    }
  }
}

template <typename T>
void ssm_attention(const ScanInputs<T>& in, AttentionForm form, std::span<T> att) {
  const auto [len, dim, nst] = in.dims;
  (void)dim;
  std::vector<T> cum(len);
  T run = 0;
  for (std::size_t i = 0; i < len; ++i) cum[i] = (run += in.delta[i]);
  for (std::size_t i = 0; i < len; ++i) {
    for (std::size_t j = 0; j < len; ++j) {
      T acc = 0;
      if (j <= i) {
        for (std::size_t n = 0; n < nst; ++n) {
          const T qk = in.c[i * nst + n] * in.b[j * nst + n];
          acc += form == AttentionForm::weighted ? qk * std::exp(in.a[n] * (cum[i] - cum[j])) : qk;
        }
      }
      att[i * len + j] = acc;
    }
  }
}

template <typename T>
void ssm_attention_backward(const ScanInputs<T>& in, AttentionForm form, std::span<const T> gatt,
                            const ScanGrads<T>& out) {
  const auto [len, dim, nst] = in.dims;
  (void)dim;
  std::fill(out.delta.begin(), out.delta.end(), T(0));
  std::fill(out.a.begin(), out.a.end(), T(0));
  std::fill(out.b.begin(), out.b.end(), T(0));
  std::fill(out.c.begin(), out.c.end(), T(0));
  std::vector<T> cum(len), gcum(len, T(0));
  T run = 0;
  for (std::size_t i = 0; i < len; ++i) cum[i] = (run += in.delta[i]);
  for (std::size_t i = 0; i < len; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      const T g = gatt[i * len + j];
      for (std::size_t n = 0; n < nst; ++n) {
        const T e = form == AttentionForm::weighted ? std::exp(in.a[n] * (cum[i] - cum[j])) : T(1);
        const T ci = in.c[i * nst + n];
        const T bj = in.b[j * nst + n];
        out.c[i * nst + n] += g * bj * e;
        out.b[j * nst + n] += g * ci * e;
        if (form == AttentionForm::weighted) {
          const T t = g * ci * bj * e;
          out.a[n] += t * (cum[i] - cum[j]);
          gcum[i] += t * in.a[n];
          gcum[j] -= t * in.a[n];
        }
      }
    }
  }
  T tail = 0;
  for (std::size_t k = len; k-- > 0;) out.delta[k] = (tail += gcum[k]);
}

#define OPENUS_INSTANTIATE(T)                                                                   \
  template void gemm<T>(std::span<const T>, std::span<const T>, std::span<T>, std::size_t,     \
                        std::size_t, std::size_t, bool, bool, bool);                           \
  template void scan_forward<T>(const ScanInputs<T>&, std::span<T>, std::span<T>);             \
  template void scan_backward<T>(const ScanInputs<T>&, std::span<const T>, std::span<const T>, \
                                 const ScanGrads<T>&);                                          \
  template void ssm_attention<T>(const ScanInputs<T>&, AttentionForm, std::span<T>);           \
  template void ssm_attention_backward<T>(const ScanInputs<T>&, AttentionForm,                 \
                                          std::span<const T>, const ScanGrads<T>&);

OPENUS_INSTANTIATE(float)
OPENUS_INSTANTIATE(double)
#undef OPENUS_INSTANTIATE

}  // namespace openus::kernels::serial
