// SPDX-License-Identifier: Apache-2.0
#include "openus/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace openus {

namespace {

template <typename T>
using Node = detail::Node<T>;
template <typename T>
using BackwardFn = std::function<void(Node<T>&)>;

// Builds an op result. The node is recorded only when a tape is active on
// this thread and at least one input requires a gradient.
template <typename T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> values,
                      const std::vector<Tensor<T>>& inputs, BackwardFn<T> backward) {
  for (T v : values)
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite output from ") + op);
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->values = std::make_shared<std::vector<T>>(std::move(values));
  node->leaf = false;
  node->op = op;
  Tape<T>* tape = Tape<T>::active();
  const bool track =
      tape && std::any_of(inputs.begin(), inputs.end(), [](const Tensor<T>& t) { return t.requires_grad(); });
  if (track) {
    node->requires_grad = true;
    for (const auto& t : inputs) node->inputs.push_back(t.node());
    node->backward = std::move(backward);
    tape->record(node);
  }
  return Tensor<T>::from_node(std::move(node));
}

// Gradient slot of an input, or nullptr if it does not take gradients.
template <typename T>
T* grad_of(Node<T>& self, std::size_t input) {
  Node<T>& n = *self.inputs[input];
  return n.requires_grad ? n.grad_slot().data() : nullptr;
}

template <typename T>
const T* values_of(Node<T>& self, std::size_t input) {
  return self.inputs[input]->values->data();
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

template <typename T>
T sigmoid(T x) {
  return x >= 0 ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

// Splits a shape around `axis` into (outer, length, inner) strides.
struct AxisSplit {
  std::size_t outer = 1, length = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  require(axis < shape.size(), "axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.length = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

template <typename T>
Tensor<T> elementwise(BinaryOp op, const Tensor<T>& a, const Tensor<T>& b) {
  const bool same = a.shape() == b.shape();
  const bool a_scalar = !same && a.numel() == 1;
  const bool b_scalar = !same && !a_scalar && b.numel() == 1;
  require(same || a_scalar || b_scalar,
          "elementwise shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " are incompatible");
  const Shape shape = a_scalar ? b.shape() : a.shape();
  const std::size_t n = shape_numel(shape);
  auto av = a.data();
  auto bv = b.data();
  auto at = [&](std::size_t i) { return a_scalar ? av[0] : av[i]; };
  auto bt = [&](std::size_t i) { return b_scalar ? bv[0] : bv[i]; };

  std::vector<T> out(n);
  const char* name = "add";
  switch (op) {
    case BinaryOp::add:
      for (std::size_t i = 0; i < n; ++i) out[i] = at(i) + bt(i);
      break;
    case BinaryOp::sub:
      name = "sub";
      for (std::size_t i = 0; i < n; ++i) out[i] = at(i) - bt(i);
      break;
    case BinaryOp::mul:
      name = "mul";
      for (std::size_t i = 0; i < n; ++i) out[i] = at(i) * bt(i);
      break;
    case BinaryOp::div:
      name = "div";
      for (std::size_t i = 0; i < n; ++i) {
        if (bt(i) == T(0)) throw DomainError("division by zero");
        out[i] = at(i) / bt(i);
      }
      break;
  }

  return make_result<T>(name, shape, std::move(out), {a, b}, [op, n, a_scalar, b_scalar](Node<T>& self) {
    const T* g = self.grad.data();
    const T* x = values_of(self, 0);
    const T* y = values_of(self, 1);
    T* ga = grad_of(self, 0);
    T* gb = grad_of(self, 1);
    auto xa = [&](std::size_t i) { return a_scalar ? x[0] : x[i]; };
    auto yb = [&](std::size_t i) { return b_scalar ? y[0] : y[i]; };
    for (std::size_t i = 0; i < n; ++i) {
      T da = 0, db = 0;
      switch (op) {
        case BinaryOp::add: da = g[i]; db = g[i]; break;
        case BinaryOp::sub: da = g[i]; db = -g[i]; break;
        case BinaryOp::mul: da = g[i] * yb(i); db = g[i] * xa(i); break;
        case BinaryOp::div: da = g[i] / yb(i); db = -g[i] * xa(i) / (yb(i) * yb(i)); break;
      }
      if (ga) ga[a_scalar ? 0 : i] += da;
      if (gb) gb[b_scalar ? 0 : i] += db;
    }
  });
}

template <typename T>
Tensor<T> elementwise(UnaryOp op, const Tensor<T>& a) {
  const std::size_t n = a.numel();
  auto av = a.data();
  std::vector<T> out(n);
  const char* name = "exp";
  switch (op) {
    case UnaryOp::exp:
      for (std::size_t i = 0; i < n; ++i) out[i] = std::exp(av[i]);
      break;
    case UnaryOp::log:
      name = "log";
      for (std::size_t i = 0; i < n; ++i) {
        if (!(av[i] > T(0))) throw DomainError("log of non-positive value");
        out[i] = std::log(av[i]);
      }
      break;
    case UnaryOp::neg:
      name = "neg";
      for (std::size_t i = 0; i < n; ++i) out[i] = -av[i];
      break;
  }
  return make_result<T>(name, a.shape(), std::move(out), {a}, [op, n](Node<T>& self) {
    T* ga = grad_of(self, 0);
    if (!ga) return;
    const T* g = self.grad.data();
    const T* x = values_of(self, 0);
    const T* y = self.values->data();
    for (std::size_t i = 0; i < n; ++i) {
      switch (op) {
        case UnaryOp::exp: ga[i] += g[i] * y[i]; break;
        case UnaryOp::log: ga[i] += g[i] / x[i]; break;
        case UnaryOp::neg: ga[i] -= g[i]; break;
      }
    }
  });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  return add(a, Tensor<T>::scalar(s));
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
  return mul(a, Tensor<T>::scalar(s));
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  const std::size_t n = x.numel();
  auto xv = x.data();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = xv[i] * sigmoid(xv[i]);
  return make_result<T>("silu", x.shape(), std::move(out), {x}, [n](Node<T>& self) {
    T* gx = grad_of(self, 0);
    if (!gx) return;
    const T* g = self.grad.data();
    const T* v = values_of(self, 0);
    for (std::size_t i = 0; i < n; ++i) {
      const T s = sigmoid(v[i]);
      gx[i] += g[i] * s * (T(1) + v[i] * (T(1) - s));
    }
  });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
  const std::size_t n = x.numel();
  auto xv = x.data();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = std::max(xv[i], T(0)) + std::log1p(std::exp(-std::abs(xv[i])));
  return make_result<T>("softplus", x.shape(), std::move(out), {x}, [n](Node<T>& self) {
    T* gx = grad_of(self, 0);
    if (!gx) return;
    const T* g = self.grad.data();
    const T* v = values_of(self, 0);
    for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * sigmoid(v[i]);
  });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.rank() == 2 && b.rank() == 2, "matmul needs 2-D operands");
  const std::size_t m = a.size(0), k = a.size(1), n = b.size(1);
  require(b.size(0) == k, "matmul inner dimensions differ: " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
  std::vector<T> out(m * n);
  kernels::omp::gemm<T>(a.data(), b.data(), out, m, k, n, false, false, false);
  return make_result<T>("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](Node<T>& self) {
    std::span<const T> g(self.grad);
    if (T* ga = grad_of(self, 0))
      kernels::omp::gemm<T>(g, std::span<const T>(values_of(self, 1), k * n), std::span<T>(ga, m * k), m, n, k,
                            false, true, true);
    if (T* gb = grad_of(self, 1))
      kernels::omp::gemm<T>(std::span<const T>(values_of(self, 0), m * k), g, std::span<T>(gb, k * n), k, m, n,
                            true, false, true);
  });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require(x.rank() == 2 && weight.rank() == 2, "linear needs 2-D input and weight");
  const std::size_t r = x.size(0), in = x.size(1), out_dim = weight.size(1);
  require(weight.size(0) == in, "linear weight " + shape_str(weight.shape()) + " does not fit input " +
                                    shape_str(x.shape()));
  const bool has_bias = bias.defined();
  if (has_bias) require(bias.numel() == out_dim, "linear bias length mismatch");
  std::vector<T> out(r * out_dim);
  kernels::omp::gemm<T>(x.data(), weight.data(), out, r, in, out_dim, false, false, false);
  if (has_bias) {
    auto bv = bias.data();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < out_dim; ++j) out[i * out_dim + j] += bv[j];
  }
  std::vector<Tensor<T>> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return make_result<T>("linear", {r, out_dim}, std::move(out), inputs, [r, in, out_dim, has_bias](Node<T>& self) {
    std::span<const T> g(self.grad);
    if (T* gx = grad_of(self, 0))
      kernels::omp::gemm<T>(g, std::span<const T>(values_of(self, 1), in * out_dim), std::span<T>(gx, r * in), r,
                            out_dim, in, false, true, true);
    if (T* gw = grad_of(self, 1))
      kernels::omp::gemm<T>(std::span<const T>(values_of(self, 0), r * in), g, std::span<T>(gw, in * out_dim), in, r,
                            out_dim, true, false, true);
    if (has_bias) {
      if (T* gb = grad_of(self, 2))
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < out_dim; ++j) gb[j] += g[i * out_dim + j];
    }
  });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight) {
  return linear(x, weight, Tensor<T>());
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  require(a.rank() == 2, "transpose needs a 2-D tensor");
  const std::size_t m = a.size(0), n = a.size(1);
  auto av = a.data();
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  return make_result<T>("transpose", {n, m}, std::move(out), {a}, [m, n](Node<T>& self) {
    T* ga = grad_of(self, 0);
    if (!ga) return;
    const T* g = self.grad.data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  require(shape_numel(shape) == a.numel(),
          "cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  for (std::size_t d : shape) require(d > 0, "reshape to a zero dimension");
  std::vector<T> out(a.data().begin(), a.data().end());
  const std::size_t n = a.numel();
  return make_result<T>("reshape", std::move(shape), std::move(out), {a}, [n](Node<T>& self) {
    T* ga = grad_of(self, 0);
    if (!ga) return;
    for (std::size_t i = 0; i < n; ++i) ga[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> softmax_t(const Tensor<T>& x, T tau) {
  if (!(tau > T(0))) throw DomainError("softmax temperature must be positive");
  const std::size_t k = x.shape().back();
  const std::size_t rows = x.numel() / k;
  auto xv = x.data();
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * k;
    T* yr = out.data() + r * k;
    const T mx = *std::max_element(xr, xr + k);
    T total = 0;
    for (std::size_t j = 0; j < k; ++j) total += (yr[j] = std::exp((xr[j] - mx) / tau));
    for (std::size_t j = 0; j < k; ++j) yr[j] /= total;
  }
  return make_result<T>("softmax_t", x.shape(), std::move(out), {x}, [k, rows, tau](Node<T>& self) {
    T* gx = grad_of(self, 0);
    if (!gx) return;
    const T* g = self.grad.data();
    const T* y = self.values->data();
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = 0;
      for (std::size_t j = 0; j < k; ++j) dot += g[r * k + j] * y[r * k + j];
      for (std::size_t j = 0; j < k; ++j) gx[r * k + j] += y[r * k + j] * (g[r * k + j] - dot) / tau;
    }
  });
}

template <typename T>
Tensor<T> log_softmax_t(const Tensor<T>& x, T tau) {
  if (!(tau > T(0))) throw DomainError("softmax temperature must be positive");
  const std::size_t k = x.shape().back();
  const std::size_t rows = x.numel() / k;
  auto xv = x.data();
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * k;
    T* yr = out.data() + r * k;
    const T mx = *std::max_element(xr, xr + k);
    T total = 0;
    for (std::size_t j = 0; j < k; ++j) total += std::exp((xr[j] - mx) / tau);
    const T lse = std::log(total);
    for (std::size_t j = 0; j < k; ++j) yr[j] = (xr[j] - mx) / tau - lse;
  }
  return make_result<T>("log_softmax_t", x.shape(), std::move(out), {x}, [k, rows, tau](Node<T>& self) {
    T* gx = grad_of(self, 0);
    if (!gx) return;
    const T* g = self.grad.data();
    const T* y = self.values->data();
    for (std::size_t r = 0; r < rows; ++r) {
      T gsum = 0;
      for (std::size_t j = 0; j < k; ++j) gsum += g[r * k + j];
      for (std::size_t j = 0; j < k; ++j) gx[r * k + j] += (g[r * k + j] - std::exp(y[r * k + j]) * gsum) / tau;
    }
  });
}

template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const std::size_t d = x.shape().back();
  require(gamma.numel() == d && beta.numel() == d, "layernorm affine length must equal the last axis");
  if (!(eps > T(0))) throw DomainError("layernorm eps must be positive");
  const std::size_t rows = x.numel() / d;
  auto xv = x.data();
  auto gv = gamma.data();
  auto bv = beta.data();
  std::vector<T> out(x.numel());
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto rstd = std::make_shared<std::vector<T>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * d;
    T mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= T(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= T(d);
    const T rs = T(1) / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (xr[j] - mu) * rs;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = gv[j] * h + bv[j];
    }
  }
  return make_result<T>("layernorm", x.shape(), std::move(out), {x, gamma, beta},
                        [d, rows, xhat, rstd](Node<T>& self) {
                          const T* g = self.grad.data();
                          const T* gam = values_of(self, 1);
                          T* gx = grad_of(self, 0);
                          T* gg = grad_of(self, 1);
                          T* gb = grad_of(self, 2);
                          for (std::size_t r = 0; r < rows; ++r) {
                            const T* h = xhat->data() + r * d;
                            const T* gr = g + r * d;
                            T mean_g = 0, mean_gh = 0;
                            for (std::size_t j = 0; j < d; ++j) {
                              if (gg) gg[j] += gr[j] * h[j];
                              if (gb) gb[j] += gr[j];
                              const T gh = gr[j] * gam[j];
                              mean_g += gh;
                              mean_gh += gh * h[j];
                            }
                            if (!gx) continue;
                            mean_g /= T(d);
                            mean_gh /= T(d);
                            for (std::size_t j = 0; j < d; ++j)
                              gx[r * d + j] += (*rstd)[r] * (gr[j] * gam[j] - mean_g - h[j] * mean_gh);
                          }
                        });
}

template <typename T>
Tensor<T> reduce(ReduceOp op, const Tensor<T>& x, const std::vector<int>& axes) {
  require(!axes.empty(), "reduce needs at least one axis");
  const Shape& in_shape = x.shape();
  const std::size_t rank = in_shape.size();
  std::vector<bool> reduced(rank, false);
  for (int ax : axes) {
    require(ax >= 0 && static_cast<std::size_t>(ax) < rank,
            "reduce axis " + std::to_string(ax) + " invalid for " + shape_str(in_shape));
    require(!reduced[ax], "reduce axis listed twice");
    reduced[ax] = true;
  }
  Shape out_shape;
  for (std::size_t i = 0; i < rank; ++i)
    if (!reduced[i]) out_shape.push_back(in_shape[i]);
  if (out_shape.empty()) out_shape.push_back(1);
  const std::size_t out_n = shape_numel(out_shape);
  const std::size_t in_n = x.numel();
  const std::size_t count = in_n / out_n;

  // Flat output index of every input element.
  auto target = std::make_shared<std::vector<std::size_t>>(in_n);
  {
    std::vector<std::size_t> idx(rank, 0);
    for (std::size_t flat = 0; flat < in_n; ++flat) {
      std::size_t o = 0;
      for (std::size_t i = 0; i < rank; ++i)
        if (!reduced[i]) o = o * in_shape[i] + idx[i];
      (*target)[flat] = o;
      for (std::size_t i = rank; i-- > 0;) {
        if (++idx[i] < in_shape[i]) break;
        idx[i] = 0;
      }
    }
  }

  auto xv = x.data();
  std::vector<T> out(out_n, T(0));
  auto argmax = std::make_shared<std::vector<std::size_t>>();
  const char* name = "sum";
  if (op == ReduceOp::max) {
    name = "max";
    argmax->assign(out_n, in_n);
    for (std::size_t i = 0; i < in_n; ++i) {
      std::size_t& best = (*argmax)[(*target)[i]];
      if (best == in_n || xv[i] > xv[best]) best = i;
    }
    for (std::size_t o = 0; o < out_n; ++o) out[o] = xv[(*argmax)[o]];
    std::vector<std::size_t> ties(out_n, 0);
    for (std::size_t i = 0; i < in_n; ++i)
      if (xv[i] == out[(*target)[i]]) ++ties[(*target)[i]];
    for (std::size_t o = 0; o < out_n; ++o)
      if (ties[o] > 1) ++detail::kink_counter();
  } else {
    for (std::size_t i = 0; i < in_n; ++i) out[(*target)[i]] += xv[i];
    if (op == ReduceOp::mean) {
      name = "mean";
      for (T& v : out) v /= T(count);
    }
  }
  return make_result<T>(name, out_shape, std::move(out), {x}, [op, in_n, count, target, argmax](Node<T>& self) {
    T* gx = grad_of(self, 0);
    if (!gx) return;
    const T* g = self.grad.data();
    if (op == ReduceOp::max) {
      for (std::size_t o = 0; o < argmax->size(); ++o) gx[(*argmax)[o]] += g[o];
      return;
    }
    const T scale = op == ReduceOp::mean ? T(1) / T(count) : T(1);
    for (std::size_t i = 0; i < in_n; ++i) gx[i] += g[(*target)[i]] * scale;
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  std::vector<int> axes(x.rank());
  std::iota(axes.begin(), axes.end(), 0);
  return reduce(ReduceOp::sum, x, axes);
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  std::vector<int> axes(x.rank());
  std::iota(axes.begin(), axes.end(), 0);
  return reduce(ReduceOp::mean, x, axes);
}

template <typename T>
Tensor<T> gather(const Tensor<T>& x, const std::vector<std::size_t>& index) {
  require(!index.empty(), "gather needs at least one index");
  const std::size_t rows = x.size(0);
  const std::size_t width = x.numel() / rows;
  for (std::size_t i : index) require(i < rows, "gather index out of range");
  Shape shape = x.shape();
  shape[0] = index.size();
  auto xv = x.data();
  std::vector<T> out(index.size() * width);
  for (std::size_t r = 0; r < index.size(); ++r)
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(index[r] * width), width,
                out.begin() + static_cast<std::ptrdiff_t>(r * width));
  return make_result<T>("gather", std::move(shape), std::move(out), {x}, [index, width](Node<T>& self) {
    T* gx = grad_of(self, 0);
    if (!gx) return;
    const T* g = self.grad.data();
    for (std::size_t r = 0; r < index.size(); ++r)
      for (std::size_t j = 0; j < width; ++j) gx[index[r] * width + j] += g[r * width + j];
  });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  require(!parts.empty(), "concat of nothing");
  const Shape& first = parts.front().shape();
  require(axis < first.size(), "concat axis out of range");
  Shape shape = first;
  shape[axis] = 0;
  for (const auto& p : parts) {
    require(p.rank() == first.size(), "concat rank mismatch");
    for (std::size_t i = 0; i < first.size(); ++i)
      if (i != axis) require(p.size(i) == first[i], "concat shape mismatch off the concat axis");
    shape[axis] += p.size(axis);
  }
  const AxisSplit whole = split_axis(shape, axis);
  std::vector<std::size_t> lengths;
  for (const auto& p : parts) lengths.push_back(p.size(axis));
  std::vector<T> out(shape_numel(shape));
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto pv = parts[k].data();
    const std::size_t chunk = lengths[k] * whole.inner;
    for (std::size_t o = 0; o < whole.outer; ++o)
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * chunk), chunk,
                  out.begin() + static_cast<std::ptrdiff_t>(o * whole.length * whole.inner + offset * whole.inner));
    offset += lengths[k];
  }
  return make_result<T>("concat", shape, std::move(out), parts, [whole, lengths](Node<T>& self) {
    const T* g = self.grad.data();
    std::size_t offset = 0;
    for (std::size_t k = 0; k < lengths.size(); ++k) {
      const std::size_t chunk = lengths[k] * whole.inner;
      if (T* gp = grad_of(self, k)) {
        for (std::size_t o = 0; o < whole.outer; ++o)
          for (std::size_t j = 0; j < chunk; ++j)
            gp[o * chunk + j] += g[o * whole.length * whole.inner + offset * whole.inner + j];
      }
      offset += lengths[k];
    }
  });
}

template <typename T>
Tensor<T> cumsum(const Tensor<T>& x, std::size_t axis) {
  const AxisSplit s = split_axis(x.shape(), axis);
  auto xv = x.data();
  std::vector<T> out(x.numel());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t in = 0; in < s.inner; ++in) {
      T run = 0;
      for (std::size_t l = 0; l < s.length; ++l) {
        const std::size_t i = (o * s.length + l) * s.inner + in;
        out[i] = (run += xv[i]);
      }
    }
  return make_result<T>("cumsum", x.shape(), std::move(out), {x}, [s](Node<T>& self) {
    T* gx = grad_of(self, 0);
    if (!gx) return;
    const T* g = self.grad.data();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t in = 0; in < s.inner; ++in) {
        T run = 0;
        for (std::size_t l = s.length; l-- > 0;) {
          const std::size_t i = (o * s.length + l) * s.inner + in;
          gx[i] += (run += g[i]);
        }
      }
  });
}

template <typename T>
Tensor<T> cumprod(const Tensor<T>& x, std::size_t axis) {
  const AxisSplit s = split_axis(x.shape(), axis);
  auto xv = x.data();
  std::vector<T> out(x.numel());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t in = 0; in < s.inner; ++in) {
      T run = 1;
      for (std::size_t l = 0; l < s.length; ++l) {
        const std::size_t i = (o * s.length + l) * s.inner + in;
        out[i] = (run *= xv[i]);
      }
    }
  return make_result<T>("cumprod", x.shape(), std::move(out), {x}, [s](Node<T>& self) {
    T* gx = grad_of(self, 0);
    if (!gx) return;
    const T* g = self.grad.data();
    const T* v = values_of(self, 0);
    auto at = [&](std::size_t o, std::size_t l, std::size_t in) { return (o * s.length + l) * s.inner + in; };
    // d y_i / d x_k = prod_{j <= i, j != k} x_j; no division, so zeros are fine.
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t in = 0; in < s.inner; ++in) {
        T prefix = 1;
        for (std::size_t k = 0; k < s.length; ++k) {
          T run = prefix;
          T acc = g[at(o, k, in)] * run;
          for (std::size_t i = k + 1; i < s.length; ++i) {
            run *= v[at(o, i, in)];
            acc += g[at(o, i, in)] * run;
          }
          gx[at(o, k, in)] += acc;
          prefix *= v[at(o, k, in)];
        }
      }
  });
}

namespace {

template <typename T>
kernels::ScanDims check_scan_shapes(const Tensor<T>& delta, const Tensor<T>& a, const Tensor<T>& b,
                                    const Tensor<T>& c) {
  require(b.rank() == 2 && c.rank() == 2, "scan b and c must be [T x N]");
  const std::size_t len = b.size(0), nst = b.size(1);
  require(c.shape() == b.shape(), "scan b and c shapes differ");
  require(delta.numel() == len, "scan delta must have one entry per step");
  require(a.numel() == nst, "scan a must have one entry per state");
  for (T v : delta.data())
    if (!(v > T(0))) throw DomainError("selective scan requires delta > 0");
  return {len, 0, nst};
}

template <typename T>
void add_into(T* dst, const std::vector<T>& src) {
  if (!dst) return;
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

}  // namespace

template <typename T>
Tensor<T> selective_scan(const Tensor<T>& u, const Tensor<T>& delta, const Tensor<T>& a, const Tensor<T>& b,
                         const Tensor<T>& c) {
  kernels::ScanDims dims = check_scan_shapes(delta, a, b, c);
  require(u.rank() == 2 && u.size(0) == dims.length, "scan u must be [T x D]");
  dims.channels = u.size(1);
  const std::size_t len = dims.length, dim = dims.channels, nst = dims.states;
  std::vector<T> y(len * dim);
  auto states = std::make_shared<std::vector<T>>(len * nst * dim);
  kernels::ScanInputs<T> in{dims, u.data(), delta.data(), a.data(), b.data(), c.data()};
  kernels::omp::scan_forward<T>(in, y, *states);
  return make_result<T>("selective_scan", {len, dim}, std::move(y), {u, delta, a, b, c},
                        [dims, states](Node<T>& self) {
                          const std::size_t len = dims.length, dim = dims.channels, nst = dims.states;
                          kernels::ScanInputs<T> in{dims,
                                                    {values_of(self, 0), len * dim},
                                                    {values_of(self, 1), len},
                                                    {values_of(self, 2), nst},
                                                    {values_of(self, 3), len * nst},
                                                    {values_of(self, 4), len * nst}};
                          std::vector<T> gu(len * dim), gd(len), ga(nst), gb(len * nst), gc(len * nst);
                          kernels::omp::scan_backward<T>(in, *states, self.grad, {gu, gd, ga, gb, gc});
                          add_into(grad_of(self, 0), gu);
                          add_into(grad_of(self, 1), gd);
                          add_into(grad_of(self, 2), ga);
                          add_into(grad_of(self, 3), gb);
                          add_into(grad_of(self, 4), gc);
                        });
}

template <typename T>
Tensor<T> ssm_attention(const Tensor<T>& delta, const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& c,
                        AttentionForm form) {
  const kernels::ScanDims dims = check_scan_shapes(delta, a, b, c);
  const std::size_t len = dims.length;
  std::vector<T> att(len * len);
  kernels::ScanInputs<T> in{dims, {}, delta.data(), a.data(), b.data(), c.data()};
  kernels::omp::ssm_attention<T>(in, form, att);
  return make_result<T>("ssm_attention", {len, len}, std::move(att), {delta, a, b, c},
                        [dims, form](Node<T>& self) {
                          const std::size_t len = dims.length, nst = dims.states;
                          kernels::ScanInputs<T> in{dims,
                                                    {},
                                                    {values_of(self, 0), len},
                                                    {values_of(self, 1), nst},
                                                    {values_of(self, 2), len * nst},
                                                    {values_of(self, 3), len * nst}};
                          std::vector<T> gd(len), ga(nst), gb(len * nst), gc(len * nst);
                          kernels::omp::ssm_attention_backward<T>(in, form, self.grad, {{}, gd, ga, gb, gc});
                          add_into(grad_of(self, 0), gd);
                          add_into(grad_of(self, 1), ga);
                          add_into(grad_of(self, 2), gb);
                          add_into(grad_of(self, 3), gc);
                        });
}

template <typename T>
Tensor<T> tile_rows(const Tensor<T>& row, std::size_t rows) {
  const std::size_t n = row.numel();
  return matmul(Tensor<T>::full({rows, 1}, T(1)), reshape(row, {1, n}));
}

template <typename T>
Tensor<T> tile_cols(const Tensor<T>& column, std::size_t cols) {
  const std::size_t n = column.numel();
  return matmul(reshape(column, {n, 1}), Tensor<T>::full({1, cols}, T(1)));
}

template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x, T eps) {
  require(x.rank() == 2, "l2_normalize_rows needs a 2-D tensor");
  const Tensor<T> sq = reduce(ReduceOp::sum, mul(x, x), {1});
  const Tensor<T> norm = exp(mul_scalar(log(add_scalar(sq, eps)), T(0.5)));
  return div(x, tile_cols(norm, x.size(1)));
}

#define OPENUS_INSTANTIATE(T)                                                                              \
  template Tensor<T> elementwise<T>(BinaryOp, const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> elementwise<T>(UnaryOp, const Tensor<T>&);                                           \
  template Tensor<T> add_scalar<T>(const Tensor<T>&, T);                                                  \
  template Tensor<T> mul_scalar<T>(const Tensor<T>&, T);                                                  \
  template Tensor<T> silu<T>(const Tensor<T>&);                                                           \
  template Tensor<T> softplus<T>(const Tensor<T>&);                                                       \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                     \
  template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> transpose<T>(const Tensor<T>&);                                                      \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                                 \
  template Tensor<T> softmax_t<T>(const Tensor<T>&, T);                                                   \
  template Tensor<T> log_softmax_t<T>(const Tensor<T>&, T);                                               \
  template Tensor<T> layernorm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);               \
  template Tensor<T> reduce<T>(ReduceOp, const Tensor<T>&, const std::vector<int>&);                      \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                            \
  template Tensor<T> mean<T>(const Tensor<T>&);                                                           \
  template Tensor<T> gather<T>(const Tensor<T>&, const std::vector<std::size_t>&);                        \
  template Tensor<T> concat<T>(const std::vector<Tensor<T>>&, std::size_t);                               \
  template Tensor<T> cumsum<T>(const Tensor<T>&, std::size_t);                                            \
  template Tensor<T> cumprod<T>(const Tensor<T>&, std::size_t);                                           \
  template Tensor<T> selective_scan<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,              \
                                       const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> ssm_attention<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,               \
                                      const Tensor<T>&, AttentionForm);                                   \
  template Tensor<T> tile_rows<T>(const Tensor<T>&, std::size_t);                                         \
  template Tensor<T> tile_cols<T>(const Tensor<T>&, std::size_t);                                         \
  template Tensor<T> l2_normalize_rows<T>(const Tensor<T>&, T);

OPENUS_INSTANTIATE(float)
OPENUS_INSTANTIATE(double)
#undef OPENUS_INSTANTIATE

}  // namespace openus
