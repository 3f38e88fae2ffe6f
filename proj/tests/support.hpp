// SPDX-License-Identifier: Apache-2.0
//
// Helpers shared by the unit tests and the acceptance binary.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "openus/distillation.hpp"
#include "openus/encoder.hpp"
#include "openus/grad_check.hpp"
#include "openus/masking.hpp"
#include "openus/trainer.hpp"
#include "openus/ops.hpp"

namespace openus::testing {

inline Tensor<double> rand_t(Shape shape, std::mt19937_64& rng, double lo = -1, double hi = 1, bool grad = true) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = d(rng);
  return Tensor<double>(std::move(shape), std::move(v), grad);
}

struct GradCase {
  std::string name;
  GradCheckReport report;
};

/// Contracts the output with fixed random weights so that every output
/// element contributes to the checked scalar.
inline Tensor<double> contract(const Tensor<double>& y, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  const Tensor<double> w = rand_t(y.shape(), rng, -1, 1, false);
  return sum(mul(y, w));
}

/// Finite-difference check of every differentiable op at real64.
inline std::vector<GradCase> op_grad_suite(double h = 1e-4, double tol = 1e-4) {
  std::vector<GradCase> out;
  std::mt19937_64 rng(7);
  auto check = [&](const std::string& name, std::vector<Tensor<double>> params,
                   const std::function<Tensor<double>()>& f) {
    out.push_back({name, grad_check<double>([&] { return contract(f()); }, params, h, tol)});
  };
  const auto a = rand_t({3, 4}, rng), b = rand_t({3, 4}, rng);
  const auto pos = rand_t({3, 4}, rng, 0.5, 2.0);
  check("add", {a, b}, [&] { return add(a, b); });
  check("sub", {a, b}, [&] { return sub(a, b); });
  check("mul", {a, b}, [&] { return mul(a, b); });
  check("div", {a, pos}, [&] { return div(a, pos); });
  check("exp", {a}, [&] { return exp(a); });
  check("log", {pos}, [&] { return log(pos); });
  check("neg", {a}, [&] { return neg(a); });
  check("add_scalar", {a}, [&] { return add_scalar(a, 0.3); });
  check("mul_scalar", {a}, [&] { return mul_scalar(a, -1.7); });
  check("silu", {a}, [&] { return silu(a); });
  check("softplus", {a}, [&] { return softplus(a); });
  const auto m = rand_t({4, 5}, rng), bias5 = rand_t({5}, rng);
  check("matmul", {a, m}, [&] { return matmul(a, m); });
  check("linear", {a, m, bias5}, [&] { return linear(a, m, bias5); });
  check("transpose", {a}, [&] { return transpose(a); });
  check("reshape", {a}, [&] { return reshape(a, {2, 6}); });
  check("softmax_t", {a}, [&] { return softmax_t(a, 0.5); });
  check("log_softmax_t", {a}, [&] { return log_softmax_t(a, 0.07); });
  const auto gamma = rand_t({4}, rng, 0.5, 1.5), beta = rand_t({4}, rng);
  check("layernorm", {a, gamma, beta}, [&] { return layernorm(a, gamma, beta); });
  check("reduce_sum", {a}, [&] { return reduce(ReduceOp::sum, a, {0}); });
  check("reduce_mean", {a}, [&] { return reduce(ReduceOp::mean, a, {1}); });
  check("reduce_max", {a}, [&] { return reduce(ReduceOp::max, a, {1}); });
  check("sum", {a}, [&] { return mul(sum(a), sum(a)); });
  check("mean", {a}, [&] { return mul(mean(a), sum(b)); });
  check("gather", {a}, [&] { return gather(a, {2, 0, 2, 1}); });
  check("concat", {a, b}, [&] { return concat<double>({a, b}, 1); });
  check("cumsum", {a}, [&] { return cumsum(a, 0); });
  check("cumprod", {pos}, [&] { return cumprod(pos, 1); });
  const auto row = rand_t({4}, rng);
  check("tile_rows", {row}, [&] { return tile_rows(row, 3); });
  check("tile_cols", {row}, [&] { return tile_cols(row, 3); });
  check("l2_normalize_rows", {a}, [&] { return l2_normalize_rows(a); });

  const std::size_t T = 6, D = 3, N = 4;
  const auto u = rand_t({T, D}, rng), delta = rand_t({T}, rng, 0.05, 0.5);
  const auto av = rand_t({N}, rng, -1.5, -0.2), bm = rand_t({T, N}, rng), cm = rand_t({T, N}, rng);
  check("selective_scan", {u, delta, av, bm, cm}, [&] { return selective_scan(u, delta, av, bm, cm); });
  check("ssm_attention", {delta, av, bm, cm}, [&] { return ssm_attention(delta, av, bm, cm); });
  check("ssm_attention_plain", {delta, av, bm, cm},
        [&] { return ssm_attention(delta, av, bm, cm, AttentionForm::plain); });
  return out;
}

inline EncoderConfig tiny_encoder_config() {
  EncoderConfig c;
  c.image_size = 16;
  c.stem_patch = 4;
  c.stages = 2;
  c.stage_dims = {8, 16};
  c.depths = {1, 1};
  c.state_dim = 4;
  c.scan_directions = 2;
  c.mlp_ratio = 2.0;
  return c;
}

template <typename Fn>
void visit_encoder(EncoderParams<double>& p, Fn&& fn) {
  for_each_param(p, "", [&](const std::string&, Tensor<double>& t, bool) { fn(t); });
}

/// Full encoder on a 16x16 input: gradient of a contraction of the patch
/// tokens with respect to every parameter.
inline GradCheckReport tiny_encoder_grad_check(std::uint64_t seed, double h = 1e-4, double tol = 1e-4,
                                               bool with_mask = false) {
  const EncoderConfig config = tiny_encoder_config();
  std::mt19937_64 rng(seed);
  EncoderParams<double> params = init_encoder<double>(config, rng, true);
  const Tensor<double> image = rand_t({16, 16}, rng, 0, 1, false);
  std::vector<Tensor<double>> leaves;
  visit_encoder(params, [&](Tensor<double>& t) { leaves.push_back(t); });
  std::vector<std::uint8_t> mask;
  if (with_mask) mask = {1, 0, 0, 1, 0, 1, 1, 0, 0, 0, 1, 0, 1, 0, 0, 0};
  return grad_check<double>(
      [&] {
        const EncoderOutput<double> out = encode(image, config, params, mask);
        return add(contract(out.patch_tokens, 5), contract(out.cls_token, 6));
      },
      leaves, h, tol);
}

/// Random single-direction scan parameters for tokens of width `dim`.
inline ScanDirectionParams<double> random_direction(std::size_t dim, std::size_t states, std::mt19937_64& rng) {
  ScanDirectionParams<double> p;
  p.delta_proj = {rand_t({dim, 1}, rng, -0.5, 0.5, false), rand_t({1}, rng, -3, 0, false)};
  p.b_proj = {rand_t({dim, states}, rng, -1, 1, false), rand_t({states}, rng, -0.2, 0.2, false)};
  p.c_proj = {rand_t({dim, states}, rng, -1, 1, false), rand_t({states}, rng, -0.2, 0.2, false)};
  p.a_log = rand_t({states}, rng, -1, 1.5, false);
  return p;
}

struct EquivalenceResult {
  double max_abs_error = 0;
  std::size_t draws = 0;
};

/// Attention form vs recurrence over random (params, sequence) draws with
/// T <= max_len, random grid shapes and scan directions.
inline EquivalenceResult scan_equivalence(std::size_t draws, std::size_t max_len, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  EquivalenceResult r;
  for (std::size_t k = 0; k < draws; ++k) {
    const std::size_t len = std::uniform_int_distribution<std::size_t>(1, max_len)(rng);
    std::vector<std::size_t> divisors;
    for (std::size_t d = 1; d <= len; ++d)
      if (len % d == 0) divisors.push_back(d);
    const std::size_t gh = divisors[std::uniform_int_distribution<std::size_t>(0, divisors.size() - 1)(rng)];
    const std::size_t dim = std::uniform_int_distribution<std::size_t>(1, 6)(rng);
    const std::size_t states = std::uniform_int_distribution<std::size_t>(1, 6)(rng);
    const std::size_t dir = std::uniform_int_distribution<std::size_t>(0, 3)(rng);
    const ScanDirectionParams<double> p = random_direction(dim, states, rng);
    const Tensor<double> x = rand_t({len, dim}, rng, -2, 2, false);
    const Tensor<double> y1 = selective_scan(x, p, gh, len / gh, dir);
    const Tensor<double> y2 = ssm_attention_form(x, p, gh, len / gh, dir).y;
    for (std::size_t i = 0; i < y1.numel(); ++i) r.max_abs_error = std::max(r.max_abs_error, std::abs(y1[i] - y2[i]));
    ++r.draws;
  }
  return r;
}

/// Reference ALP: plain min-max scaling, 0.5 for a constant input.
inline std::vector<double> alp_oracle(const std::vector<double>& am, const std::vector<double>& rec, double alpha) {
  auto scale = [](const std::vector<double>& v) {
    const double lo = *std::min_element(v.begin(), v.end()), hi = *std::max_element(v.begin(), v.end());
    std::vector<double> out(v.size(), 0.5);
    if (hi > lo)
      for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - lo) / (hi - lo);
    return out;
  };
  const auto a = scale(am), r = scale(rec);
  std::vector<double> s(am.size());
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = (1 - alpha) * a[i] + alpha * r[i];
  return s;
}

struct MaskContractResult {
  std::size_t cases = 0;
  std::size_t count_failures = 0;
  std::size_t containment_failures = 0;
  double max_alp_error = 0;
};

/// Random grids, ratios, thresholds and ALP inputs (with ties and constant
/// maps mixed in); checks mask size, top-score containment and the ALP values.
inline MaskContractResult mask_contracts(std::size_t cases, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  MaskContractResult r;
  std::uniform_real_distribution<double> u01(0, 1);
  for (std::size_t k = 0; k < cases; ++k) {
    const std::size_t gh = std::uniform_int_distribution<std::size_t>(1, 20)(rng);
    const std::size_t gw = std::uniform_int_distribution<std::size_t>(1, 20)(rng);
    const std::size_t n = gh * gw;
    // ratios on a coarse lattice hit exact products like 0.8 * 10 often
    const double rat = k % 2 ? std::uniform_int_distribution<int>(1, 20)(rng) / 20.0 : 0.01 + 0.99 * u01(rng);
    const double thr = rat * (k % 3 ? u01(rng) : std::uniform_int_distribution<int>(0, 10)(rng) / 10.0);
    const double alpha = k % 5 == 0 ? std::uniform_int_distribution<int>(0, 1)(rng) : u01(rng);
    std::vector<double> am(n), rec(n);
    const int levels = k % 4 == 0 ? 3 : 0;  // coarse values produce ties
    for (std::size_t i = 0; i < n; ++i) {
      am[i] = levels ? std::uniform_int_distribution<int>(0, levels)(rng) : u01(rng) * 10 - 5;
      rec[i] = k % 7 == 0 ? 1.0 : u01(rng) * 3;
    }
    const ALPMap alp = compute_alp(am, rec, alpha);
    const std::vector<double> oracle = alp_oracle(am, rec, alpha);
    for (std::size_t i = 0; i < n; ++i) r.max_alp_error = std::max(r.max_alp_error, std::abs(alp.scores[i] - oracle[i]));

    const MaskPlan plan = self_adaptive_mask(alp, gh, gw, rat, thr, rng);
    const auto need = static_cast<std::size_t>(std::ceil(static_cast<long double>(n) * rat - 1e-9L));
    std::size_t masked = 0;
    for (auto m : plan.grid) masked += m;
    if (masked != need || plan.n_masked != need) ++r.count_failures;
    // containment: the top floor(N thr) scores (ties by lower index) are masked
    const auto top = static_cast<std::size_t>(std::floor(static_cast<long double>(n) * thr + 1e-9L));
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return oracle[a] != oracle[b] ? oracle[a] > oracle[b] : a < b;
    });
    for (std::size_t i = 0; i < std::min(top, n); ++i)
      if (!plan.grid[idx[i]]) {
        ++r.containment_failures;
        break;
      }
    ++r.cases;
  }
  return r;
}

/// Fixed student, teacher perturbed away from it: after k EMA steps the
/// teacher-student l2 distance must be lambda^k times the initial distance.
/// Returns the largest |dist_k - lambda^k dist_0| over k = 1..steps.
inline double ema_law_error(std::size_t steps, double lambda, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Backbone<double> student{init_encoder<double>(tiny_encoder_config(), rng, false), {}};
  student.head = init_head<double>(16, HeadConfig{16, 8, 12}, rng, false);
  TeacherStudentPair<double> pair = make_pair(student, lambda);
  std::normal_distribution<double> noise(0, 0.1);
  for_each_param(pair.teacher, "", [&](const std::string&, Tensor<double>& t, bool) {
    for (double& x : t.mutable_data()) x += noise(rng);
  });
  auto distance = [&] {
    std::vector<double> s;
    for_each_param(pair.student, "", [&](const std::string&, Tensor<double>& t, bool) {
      s.insert(s.end(), t.data().begin(), t.data().end());
    });
    double d = 0;
    std::size_t i = 0;
    for_each_param(pair.teacher, "", [&](const std::string&, Tensor<double>& t, bool) {
      for (double x : t.data()) d += (x - s[i]) * (x - s[i]), ++i;
    });
    return std::sqrt(d);
  };
  const double d0 = distance();
  double worst = 0;
  for (std::size_t k = 1; k <= steps; ++k) {
    ema_update(pair);
    worst = std::max(worst, std::abs(distance() - std::pow(lambda, static_cast<double>(k)) * d0));
  }
  return worst;
}

/// A training config small enough for unit tests: 32x32 phantoms, four
/// images, two global and two local views.
inline TrainConfig small_train_config() {
  TrainConfig c;
  c.epochs = 3;
  c.warmup_epochs = 1;
  c.batch_size = 2;
  c.synth_count = 4;
  c.synth.size = 32;
  c.encoder.image_size = 32;
  c.encoder.stage_dims = {8, 16};
  c.encoder.state_dim = 4;
  c.head = HeadConfig{16, 8, 32};
  c.views.global_size = 32;
  c.views.local_size = 16;
  c.views.local_views = 2;
  return c;
}

}  // namespace openus::testing
