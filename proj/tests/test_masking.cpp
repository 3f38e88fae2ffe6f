// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <numbers>
#include <numeric>
#include <set>

#include "openus/masking.hpp"
#include "support.hpp"

using namespace openus;

namespace {
std::size_t count(const MaskPlan& p) { return std::accumulate(p.grid.begin(), p.grid.end(), std::size_t{0}); }

// 4-connected components of the masked cells.
std::size_t components(const MaskPlan& p) {
  std::vector<int> seen(p.size(), 0);
  std::size_t n = 0;
  for (std::size_t s = 0; s < p.size(); ++s) {
    if (!p.grid[s] || seen[s]) continue;
    ++n;
    std::vector<std::size_t> stack{s};
    seen[s] = 1;
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      const std::size_t y = i / p.grid_w, x = i % p.grid_w;
      auto visit = [&](std::size_t j) {
        if (p.grid[j] && !seen[j]) seen[j] = 1, stack.push_back(j);
      };
      if (y > 0) visit(i - p.grid_w);
      if (y + 1 < p.grid_h) visit(i + p.grid_w);
      if (x > 0) visit(i - 1);
      if (x + 1 < p.grid_w) visit(i + 1);
    }
  }
  return n;
}
}  // namespace

TEST_CASE("mask and top counts") {
  CHECK(mask_count(256, 0.8) == 205);
  CHECK(mask_count(10, 0.8) == 8);
  CHECK(mask_count(10, 0.7) == 7);
  CHECK(mask_count(3, 0.1) == 1);
  CHECK(top_count(256, 0.08) == 20);
  CHECK(top_count(10, 0.3) == 3);
  CHECK(top_count(10, 0.0) == 0);
}

TEST_CASE("self-adaptive mask example") {
  std::mt19937_64 rng(1);
  const std::vector<double> scores{0.1, 0.9, 0.3, 0.8, 0.2, 0.7, 0.0, 0.4, 0.6, 0.5};
  const MaskPlan p = self_adaptive_mask(scores, 2, 5, 0.5, 0.3, rng);
  CHECK(count(p) == 5);
  CHECK(p.alp_driven_idx == std::vector<std::size_t>{1, 3, 5});
  CHECK(p.random_idx.size() == 2);
  for (std::size_t i : p.random_idx) CHECK(std::set<std::size_t>{1, 3, 5}.count(i) == 0);

  // thr = rat: fully deterministic
  const MaskPlan d = self_adaptive_mask(scores, 2, 5, 0.4, 0.4, rng);
  CHECK(d.grid == std::vector<std::uint8_t>{0, 1, 0, 1, 0, 1, 0, 0, 1, 0});
  // thr = 0: uniform selection of ceil(N rat)
  const MaskPlan z = self_adaptive_mask(scores, 2, 5, 0.25, 0.0, rng);
  CHECK(count(z) == 3);
  CHECK(z.alp_driven_idx.empty());

  CHECK_THROWS(self_adaptive_mask(scores, 2, 5, 0.3, 0.4, rng));
  CHECK_THROWS(self_adaptive_mask(scores, 2, 4, 0.3, 0.1, rng));
  CHECK_THROWS(self_adaptive_mask(scores, 2, 5, 0.0, 0.0, rng));
}

TEST_CASE("ties resolve to the lower index") {
  CHECK(argsort_descending(std::vector<double>{1, 2, 2, 1, 2}) == std::vector<std::size_t>{1, 2, 4, 0, 3});
  std::mt19937_64 rng(2);
  const MaskPlan p = self_adaptive_mask(std::vector<double>(6, 0.5), 2, 3, 0.5, 0.5, rng);
  CHECK(p.grid == std::vector<std::uint8_t>{1, 1, 1, 0, 0, 0});
}

TEST_CASE("masking contracts over random cases") {
  const auto r = openus::testing::mask_contracts(1000, 11);
  CHECK(r.cases == 1000);
  CHECK(r.count_failures == 0);
  CHECK(r.containment_failures == 0);
  CHECK(r.max_alp_error <= 1e-12);
}

TEST_CASE("ALP examples") {
  const ALPMap a = compute_alp(std::vector<double>{0, 5, 10}, std::vector<double>{4, 2, 0}, 0.25);
  CHECK(a.scores[0] == doctest::Approx(0.25));
  CHECK(a.scores[1] == doctest::Approx(0.5));
  CHECK(a.scores[2] == doctest::Approx(0.75));
  const ALPMap c = compute_alp(std::vector<double>{3, 3}, std::vector<double>{1, 2}, 0.0);
  CHECK(c.am_constant);
  CHECK(c.scores == std::vector<double>{0.5, 0.5});
  CHECK_THROWS(compute_alp(std::vector<double>{1}, std::vector<double>{1, 2}, 0.5));
  CHECK_THROWS(compute_alp(std::vector<double>{1}, std::vector<double>{1}, 1.5));
}

TEST_CASE("random blockwise mask") {
  std::mt19937_64 rng(3);
  std::size_t total_components = 0, total_masked = 0;
  for (int k = 0; k < 200; ++k) {
    const MaskPlan p = random_blockwise_mask(16, 16, 0.4, rng);
    CHECK(count(p) == mask_count(256, 0.4));
    total_components += components(p);
    total_masked += count(p);
  }
  // blocks, not scattered cells: far fewer components than masked cells
  CHECK(static_cast<double>(total_components) < 0.1 * static_cast<double>(total_masked));
  CHECK(count(random_blockwise_mask(16, 16, 1.0, rng)) == 256);
  CHECK(count(random_blockwise_mask(1, 3, 0.5, rng)) == 2);
  CHECK_THROWS(random_blockwise_mask(4, 4, 0.0, rng));
}

TEST_CASE("uniform random mask is unbiased") {
  std::mt19937_64 rng(4);
  std::vector<double> hits(16, 0);
  const int trials = 4000;
  for (int k = 0; k < trials; ++k) {
    const MaskPlan p = uniform_random_mask(4, 4, 0.25, rng);
    CHECK(count(p) == 4);
    for (std::size_t i = 0; i < 16; ++i) hits[i] += p.grid[i];
  }
  // each cell is masked with probability 1/4; 5 sigma band
  const double sd = std::sqrt(trials * 0.25 * 0.75);
  for (double h : hits) CHECK(std::abs(h - trials * 0.25) < 5 * sd);
}

TEST_CASE("schedules") {
  MaskScheduleState s;
  s.T = 10;
  s.t = 0;
  CHECK(ratio_schedule(s) == 0.1);
  CHECK(alpha_schedule(s) == 0.1);
  s.t = 10;
  CHECK(ratio_schedule(s) == 0.9);
  CHECK(alpha_schedule(s) == 0.9);
  s.t = 5;
  CHECK(ratio_schedule(s) == doctest::Approx(0.5));
  CHECK(alpha_schedule(s) == doctest::Approx(0.5));
  s.t = 2;
  CHECK(alpha_schedule(s) == doctest::Approx(0.9 - 0.8 * (1 + std::cos(std::numbers::pi * 0.2)) / 2));
  s.t = 11;
  CHECK_THROWS(ratio_schedule(s));
  s.t = 0;
  s.T = 0;
  CHECK_THROWS(alpha_schedule(s));

  s.T = 1000;
  double pr = -1, pa = -1;
  for (std::size_t t = 0; t <= 1000; ++t) {
    s.t = t;
    const double r = ratio_schedule(s), a = alpha_schedule(s);
    CHECK(r >= pr);
    CHECK(a >= pa);
    pr = r;
    pa = a;
  }
}

TEST_CASE("reconstruction loss EMA") {
  RecLossEMA ema(0.9);
  CHECK(ema.filled("a").empty());
  ema.update("a", std::vector<double>{1, 2, 3}, std::vector<std::uint8_t>{1, 0, 1});
  CHECK(ema.filled("a") == std::vector<double>{1, 2, 3});
  ema.update("a", std::vector<double>{11, 5, 0}, std::vector<std::uint8_t>{1, 1, 0});
  const auto* e = ema.find("a");
  REQUIRE(e);
  CHECK(e->loss[0] == doctest::Approx(0.9 * 1 + 0.1 * 11));
  CHECK(e->loss[1] == 5.0);
  CHECK(e->loss[2] == 3.0);
  ema.update("b", std::vector<double>{4, 0}, std::vector<std::uint8_t>{1, 0});
  CHECK(ema.filled("b") == std::vector<double>{4, 4});
  CHECK_THROWS(ema.update("a", std::vector<double>{1, 2}, std::vector<std::uint8_t>{1, 1}));
  CHECK_THROWS(ema.update("c", std::vector<double>{-1}, std::vector<std::uint8_t>{1}));
  CHECK_THROWS(RecLossEMA(1.0));
}

TEST_CASE("mask examples from the contract") {
  std::mt19937_64 rng(12);
  CHECK(count(random_blockwise_mask(12, 12, 0.5, rng)) == 72);
  CHECK(count(uniform_random_mask(12, 12, 0.5, rng)) == 72);

  // blockwise marginals: no dead zones
  std::vector<double> freq(256, 0);
  for (int k = 0; k < 1000; ++k) {
    const MaskPlan p = random_blockwise_mask(16, 16, 0.4, rng);
    for (std::size_t i = 0; i < 256; ++i) freq[i] += p.grid[i];
  }
  for (double f : freq) {
    CHECK(f / 1000 >= 0.25);
    CHECK(f / 1000 <= 0.55);
  }

  std::uniform_real_distribution<double> u(-3, 3);
  std::vector<double> am(64), rec(64);
  for (std::size_t i = 0; i < 64; ++i) am[i] = u(rng), rec[i] = u(rng) + 3;
  const ALPMap a = compute_alp(am, rec, 0.9);
  const auto oracle = openus::testing::alp_oracle(am, rec, 0.9);
  for (std::size_t i = 0; i < 64; ++i) CHECK(std::abs(a.scores[i] - oracle[i]) <= 1e-12);
}

TEST_CASE("EMA of a constant observation converges geometrically") {
  RecLossEMA ema(0.9);
  const std::vector<std::uint8_t> on{1};
  ema.update("x", std::vector<double>{5.0}, on);
  for (int k = 1; k <= 50; ++k) {
    ema.update("x", std::vector<double>{2.0}, on);
    CHECK(std::abs(ema.find("x")->loss[0] - 2.0) == doctest::Approx(std::pow(0.9, k) * 3.0).epsilon(1e-9));
  }
}
