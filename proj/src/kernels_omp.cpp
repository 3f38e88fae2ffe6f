// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <vector>

#include "openus/kernels.hpp"

namespace openus::kernels::omp {

namespace {

// Below this many multiply-adds a parallel region costs more than it saves.
constexpr std::size_t kParallelWork = 1 << 15;
constexpr std::size_t kChannelBlock = 16;

template <typename T>
std::vector<T> decay_table(const ScanInputs<T>& in) {
  const auto [len, dim, nst] = in.dims;
  (void)dim;
  std::vector<T> decay(len * nst);
  for (std::size_t i = 0; i < len; ++i)
    for (std::size_t n = 0; n < nst; ++n) decay[i * nst + n] = std::exp(in.delta[i] * in.a[n]);
  return decay;
}

template <typename T>
std::vector<T> prefix_sum(std::span<const T> v) {
  std::vector<T> out(v.size());
  T run = 0;
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = (run += v[i]);
  return out;
}

}  // namespace

template <typename T>
void gemm(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m,
          std::size_t k, std::size_t n, bool trans_a, bool trans_b, bool accumulate) {
  std::vector<T> bt;
  const T* bp = b.data();
  if (trans_b) {
    bt.resize(k * n);
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
    bp = bt.data();
  }
  const T* ap = a.data();
  T* cp = c.data();
  const long rows = static_cast<long>(m);
#pragma omp parallel for schedule(static) if (m * n * k > kParallelWork)
  for (long ii = 0; ii < rows; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    T* ci = cp + i * n;
    if (!accumulate) std::fill(ci, ci + n, T(0));
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = trans_a ? ap[p * m + i] : ap[i * k + p];
      const T* brow = bp + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * brow[j];
    }
  }
}

template <typename T>
void scan_forward(const ScanInputs<T>& in, std::span<T> y, std::span<T> states) {
  const auto [len, dim, nst] = in.dims;
  const std::vector<T> decay = decay_table(in);
  const long blocks = static_cast<long>((dim + kChannelBlock - 1) / kChannelBlock);
  T* sp = states.data();
  T* yp = y.data();
#pragma omp parallel for schedule(static) if (len * dim * nst > kParallelWork)
  for (long blk = 0; blk < blocks; ++blk) {
    const std::size_t d0 = static_cast<std::size_t>(blk) * kChannelBlock;
    const std::size_t d1 = std::min(dim, d0 + kChannelBlock);
    for (std::size_t i = 0; i < len; ++i) {
      const T dt = in.delta[i];
      T* yi = yp + i * dim;
      for (std::size_t d = d0; d < d1; ++d) yi[d] = 0;
      for (std::size_t n = 0; n < nst; ++n) {
        const T dec = decay[i * nst + n];
        const T bn = dt * in.b[i * nst + n];
        const T cn = in.c[i * nst + n];
        T* h = sp + (i * nst + n) * dim;
        const T* hp = i > 0 ? sp + ((i - 1) * nst + n) * dim : nullptr;
        const T* ui = in.u.data() + i * dim;
        for (std::size_t d = d0; d < d1; ++d) {
          h[d] = (hp ? dec * hp[d] : T(0)) + bn * ui[d];
          yi[d] += cn * h[d];
        }
      }
    }
  }
}

template <typename T>
void scan_backward(const ScanInputs<T>& in, std::span<const T> states, std::span<const T> gy,
                   const ScanGrads<T>& out) {
  const auto [len, dim, nst] = in.dims;
  const std::vector<T> decay = decay_table(in);
  // dh_i for every step: gradient w.r.t. h_i including the path through y_i.
  std::vector<T> dhs(len * nst * dim);
  const bool par = len * dim * nst > kParallelWork;

  // Pass 1: channels are independent along the reverse recurrence.
  const long blocks = static_cast<long>((dim + kChannelBlock - 1) / kChannelBlock);
#pragma omp parallel for schedule(static) if (par)
  for (long blk = 0; blk < blocks; ++blk) {
    const std::size_t d0 = static_cast<std::size_t>(blk) * kChannelBlock;
    const std::size_t d1 = std::min(dim, d0 + kChannelBlock);
    std::vector<T> dh(nst * kChannelBlock, T(0));
    for (std::size_t i = len; i-- > 0;) {
      const T dt = in.delta[i];
      for (std::size_t d = d0; d < d1; ++d) out.u[i * dim + d] = 0;
      for (std::size_t n = 0; n < nst; ++n) {
        const T cn = in.c[i * nst + n];
        const T bn = in.b[i * nst + n];
        const T dec = decay[i * nst + n];
        T* row = dh.data() + n * kChannelBlock;
        T* keep = dhs.data() + (i * nst + n) * dim;
        for (std::size_t d = d0; d < d1; ++d) {
          T& g = row[d - d0];
          g += cn * gy[i * dim + d];
          keep[d] = g;
          out.u[i * dim + d] += g * dt * bn;
          g *= dec;
        }
      }
    }
  }

  // Pass 2: per-step reductions over channels.
  std::vector<T> a_parts(len * nst);
  const long steps = static_cast<long>(len);
#pragma omp parallel for schedule(static) if (par)
  for (long ii = 0; ii < steps; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    const T dt = in.delta[i];
    const T* ui = in.u.data() + i * dim;
    const T* gyi = gy.data() + i * dim;
    T gdelta = 0;
    for (std::size_t n = 0; n < nst; ++n) {
      const T* h = states.data() + (i * nst + n) * dim;
      const T* hp = i > 0 ? states.data() + ((i - 1) * nst + n) * dim : nullptr;
      const T* g = dhs.data() + (i * nst + n) * dim;
      const T an = in.a[n];
      const T dec = decay[i * nst + n];
      const T bn = in.b[i * nst + n];
      T gc = 0, gb = 0, ga = 0;
      for (std::size_t d = 0; d < dim; ++d) {
        const T hpd = hp ? hp[d] : T(0);
        gc += gyi[d] * h[d];
        gb += g[d] * ui[d];
        ga += g[d] * hpd;
        gdelta += g[d] * (an * dec * hpd + bn * ui[d]);
      }
      out.c[i * nst + n] = gc;
      out.b[i * nst + n] = gb * dt;
      a_parts[i * nst + n] = ga * dt * dec;
    }
    out.delta[i] = gdelta;
  }
  std::fill(out.a.begin(), out.a.end(), T(0));
  for (std::size_t i = 0; i < len; ++i)
    for (std::size_t n = 0; n < nst; ++n) out.a[n] += a_parts[i * nst + n];
}

template <typename T>
void ssm_attention(const ScanInputs<T>& in, AttentionForm form, std::span<T> att) {
  const auto [len, dim, nst] = in.dims;
  (void)dim;
  const std::vector<T> cum = prefix_sum(in.delta);
  const long rows = static_cast<long>(len);
#pragma omp parallel for schedule(dynamic, 4) if (len * len * nst > kParallelWork)
  for (long ii = 0; ii < rows; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    T* row = att.data() + i * len;
    for (std::size_t j = 0; j < len; ++j) {
      T acc = 0;
      if (j <= i) {
        const T gap = cum[i] - cum[j];
        for (std::size_t n = 0; n < nst; ++n) {
          const T qk = in.c[i * nst + n] * in.b[j * nst + n];
          acc += form == AttentionForm::weighted ? qk * std::exp(in.a[n] * gap) : qk;
        }
      }
      row[j] = acc;
    }
  }
}

template <typename T>
void ssm_attention_backward(const ScanInputs<T>& in, AttentionForm form, std::span<const T> gatt,
                            const ScanGrads<T>& out) {
  const auto [len, dim, nst] = in.dims;
  (void)dim;
  const bool weighted = form == AttentionForm::weighted;
  const bool par = len * len * nst > kParallelWork;
  const std::vector<T> cum = prefix_sum(in.delta);
  // t[i][j][n] = g_ij * c_in * b_jn * e_ijn is shared by the A and delta
  // gradients; row sums go to cum_i, column sums leave cum_j.
  std::vector<T> pair(len * len, T(0));
  std::vector<T> a_parts(len * nst, T(0));
  const long rows = static_cast<long>(len);

#pragma omp parallel for schedule(dynamic, 4) if (par)
  for (long ii = 0; ii < rows; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    for (std::size_t n = 0; n < nst; ++n) out.c[i * nst + n] = 0;
    for (std::size_t j = 0; j <= i; ++j) {
      const T g = gatt[i * len + j];
      const T gap = cum[i] - cum[j];
      T p = 0;
      for (std::size_t n = 0; n < nst; ++n) {
        const T e = weighted ? std::exp(in.a[n] * gap) : T(1);
        const T bj = in.b[j * nst + n];
        out.c[i * nst + n] += g * bj * e;
        if (weighted) {
          const T t = g * in.c[i * nst + n] * bj * e;
          a_parts[i * nst + n] += t * gap;
          p += t * in.a[n];
        }
      }
      pair[i * len + j] = p;
    }
  }

#pragma omp parallel for schedule(dynamic, 4) if (par)
  for (long jj = 0; jj < rows; ++jj) {
    const auto j = static_cast<std::size_t>(jj);
    for (std::size_t n = 0; n < nst; ++n) out.b[j * nst + n] = 0;
    for (std::size_t i = j; i < len; ++i) {
      const T g = gatt[i * len + j];
      const T gap = cum[i] - cum[j];
      for (std::size_t n = 0; n < nst; ++n) {
        const T e = weighted ? std::exp(in.a[n] * gap) : T(1);
        out.b[j * nst + n] += g * in.c[i * nst + n] * e;
      }
    }
  }

  std::fill(out.a.begin(), out.a.end(), T(0));
  std::fill(out.delta.begin(), out.delta.end(), T(0));
  if (!weighted) return;
  for (std::size_t i = 0; i < len; ++i)
    for (std::size_t n = 0; n < nst; ++n) out.a[n] += a_parts[i * nst + n];
  std::vector<T> gcum(len, T(0));
  for (std::size_t i = 0; i < len; ++i)
    for (std::size_t j = 0; j <= i; ++j) {
      gcum[i] += pair[i * len + j];
      gcum[j] -= pair[i * len + j];
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

}  // namespace openus::kernels::omp
