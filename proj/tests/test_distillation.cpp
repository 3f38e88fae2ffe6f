// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "openus/distillation.hpp"
#include "support.hpp"

using namespace openus;
using openus::testing::rand_t;

namespace {
ProjectionHead<double> small_head(std::mt19937_64& rng, bool grad) {
  return init_head<double>(6, HeadConfig{10, 5, 7}, rng, grad);
}
}  // namespace

TEST_CASE("head outputs cosine scores") {
  std::mt19937_64 rng(1);
  const auto head = small_head(rng, false);
  const auto tokens = rand_t({4, 6}, rng, -1, 1, false);
  const auto logits = head_logits(tokens, head);
  CHECK(logits.shape() == Shape{4, 7});
  for (double v : logits.data()) CHECK(std::abs(v) <= 1 + 1e-12);
  const auto single = head_logits(Tensor<double>({6}, std::vector<double>(tokens.data().begin(), tokens.data().begin() + 6)), head);
  CHECK(single.shape() == Shape{1, 7});
  for (std::size_t j = 0; j < 7; ++j) CHECK(single[j] == doctest::Approx(logits[j]).epsilon(1e-12));

  const auto probs = head_forward(tokens, head, 0.1);
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < 7; ++j) s += probs[r * 7 + j];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK_THROWS_AS(head_forward(tokens, head, 0.0), DomainError);
}

TEST_CASE("teacher centering and sharpening") {
  const Tensor<double> logits({1, 3}, {0.2, 0.5, -0.1});
  const std::vector<double> center{0.1, 0.3, -0.2};
  const auto p = teacher_probs(logits, center, 0.04);
  double z = 0;
  std::vector<double> e(3);
  for (int j = 0; j < 3; ++j) z += e[j] = std::exp((logits[j] - center[j]) / 0.04);
  for (int j = 0; j < 3; ++j) CHECK(p[j] == doctest::Approx(e[j] / z).epsilon(1e-12));
  // a constant center shifts nothing
  const auto a = teacher_probs(logits, std::vector<double>{7, 7, 7}, 0.1), b = teacher_probs(logits, {}, 0.1);
  for (int j = 0; j < 3; ++j) CHECK(a[j] == doctest::Approx(b[j]).epsilon(1e-12));
  CHECK_THROWS_AS(teacher_probs(logits, std::vector<double>{1, 2}, 0.1), ShapeError);
  const auto ls = student_log_probs(logits, 0.07);
  double zs = 0;
  for (int j = 0; j < 3; ++j) zs += std::exp(logits[j] / 0.07);
  CHECK(ls[1] == doctest::Approx(logits[1] / 0.07 - std::log(zs)).epsilon(1e-12));

  std::mt19937_64 rng(11);
  for (int k = 0; k < 50; ++k) {
    const auto l = rand_t({1, 16}, rng, -1, 1, false);
    const auto pt = teacher_probs(l, {}, 0.04);
    const auto ps = exp(student_log_probs(l, 0.07));
    CHECK(*std::max_element(pt.data().begin(), pt.data().end()) >=
          *std::max_element(ps.data().begin(), ps.data().end()));
  }
}

TEST_CASE("loss_cls equals the brute-force pair average") {
  std::mt19937_64 rng(2);
  const auto t = softmax_t(rand_t({2, 5}, rng, -1, 1, false), 0.3);
  const auto s = log_softmax_t(rand_t({8, 5}, rng), 0.5);
  double brute = 0;
  for (std::size_t g = 0; g < 2; ++g)
    for (std::size_t l = 0; l < 8; ++l)
      for (std::size_t k = 0; k < 5; ++k) brute -= t[g * 5 + k] * s[l * 5 + k];
  brute /= 16;
  CHECK(loss_cls(t, s).item() == doctest::Approx(brute).epsilon(1e-12));

  // identical one-hot teacher and student gives zero loss
  const Tensor<double> onehot({1, 3}, {0, 1, 0});
  const Tensor<double> logp({1, 3}, {-50, 0, -50});
  CHECK(loss_cls(onehot, logp).item() == doctest::Approx(0.0));
  CHECK_THROWS_AS(loss_cls(onehot, Tensor<double>({1, 4}, {0, 0, 0, 0})), ShapeError);
}

TEST_CASE("teacher receives no gradient") {
  std::mt19937_64 rng(3);
  const auto tl = rand_t({2, 5}, rng);
  const auto sl = rand_t({3, 5}, rng);
  Tape<double> tape;
  Tape<double>::Scope scope(tape);
  backward(loss_cls(softmax_t(tl, 0.04), log_softmax_t(sl, 0.1)));
  for (double g : tl.grad()) CHECK(g == 0.0);
  double total = 0;
  for (double g : sl.grad()) total += std::abs(g);
  CHECK(total > 0);
}

TEST_CASE("patch loss over masked tokens") {
  std::mt19937_64 rng(4);
  std::vector<Tensor<double>> t, s;
  for (int v = 0; v < 2; ++v) {
    t.push_back(softmax_t(rand_t({4, 3}, rng, -1, 1, false), 0.2));
    s.push_back(log_softmax_t(rand_t({4, 3}, rng, -1, 1, false), 0.2));
  }
  const std::vector<std::vector<std::uint8_t>> masks{{1, 0, 0, 1}, {0, 0, 1, 0}};
  double brute = 0;
  for (int v = 0; v < 2; ++v)
    for (std::size_t i = 0; i < 4; ++i)
      if (masks[v][i])
        for (std::size_t k = 0; k < 3; ++k) brute -= t[v][i * 3 + k] * s[v][i * 3 + k];
  const auto r = loss_patch_mim(t, s, masks);
  CHECK(r.masked_tokens == 3);
  CHECK_FALSE(r.empty);
  CHECK(r.value.item() == doctest::Approx(brute / 3).epsilon(1e-12));

  const auto e = loss_patch_mim(t, s, {{0, 0, 0, 0}, {0, 0, 0, 0}});
  CHECK(e.empty);
  CHECK(e.value.item() == 0.0);
  CHECK_THROWS(loss_patch_mim(t, s, {{1, 0, 0, 1}}));

  // one view, 8 tokens, 3 masked
  const auto t8 = softmax_t(rand_t({8, 4}, rng, -1, 1, false), 0.04);
  const auto s8 = log_softmax_t(rand_t({8, 4}, rng, -1, 1, false), 0.07);
  const std::vector<std::uint8_t> m8{0, 1, 0, 0, 1, 0, 1, 0};
  double b8 = 0;
  for (std::size_t i : {1, 4, 6})
    for (std::size_t k = 0; k < 4; ++k) b8 -= t8[i * 4 + k] * s8[i * 4 + k];
  CHECK(loss_patch_mim<double>({t8}, {s8}, {m8}).value.item() == doctest::Approx(b8 / 3).epsilon(1e-12));
}

TEST_CASE("downsample_mask") {
  const std::vector<std::uint8_t> m{1, 1, 0, 0,  //
                                    0, 0, 0, 1,  //
                                    1, 1, 1, 1,  //
                                    1, 0, 0, 1};
  CHECK(downsample_mask(m, 4, 4, 1) == std::vector<std::uint8_t>{1, 0, 1, 1});
  CHECK(downsample_mask(m, 4, 4, 2) == std::vector<std::uint8_t>{1});
  CHECK(downsample_mask(m, 4, 4, 0) == m);
  CHECK_THROWS_AS(downsample_mask(std::vector<std::uint8_t>(6, 1), 2, 3, 1), ShapeError);
}

TEST_CASE("center update and entropy") {
  CenterState c;
  c.decay = 0.9;
  center_update(c, std::vector<double>{1, 3, 3, 5}, 2);
  CHECK(c.center[0] == doctest::Approx(0.2));
  CHECK(c.center[1] == doctest::Approx(0.4));
  center_update(c, std::vector<double>{0, 0}, 1);
  CHECK(c.center[0] == doctest::Approx(0.18));
  CHECK_THROWS_AS(center_update(c, std::vector<double>{1, 2, 3}, 1), ShapeError);
  CenterState g;
  g.center = {4.0, -1.0};
  for (int k = 1; k <= 40; ++k) {
    center_update(g, std::vector<double>{1.0, 1.0}, 1);
    CHECK(g.center[0] - 1.0 == doctest::Approx(std::pow(0.9, k) * 3.0).epsilon(1e-9));
    CHECK(1.0 - g.center[1] == doctest::Approx(std::pow(0.9, k) * 2.0).epsilon(1e-9));
  }

  CHECK(mean_distribution_entropy(std::vector<double>{1, 0, 0, 1}, 2) == doctest::Approx(std::log(2.0)));
  CHECK(mean_distribution_entropy(std::vector<double>{1, 0, 1, 0}, 2) == doctest::Approx(0.0));
}

TEST_CASE("EMA teacher") {
  std::mt19937_64 rng(5);
  Backbone<double> student{init_encoder<double>(openus::testing::tiny_encoder_config(), rng, true), {}};
  student.head = init_head<double>(16, HeadConfig{16, 8, 12}, rng, true);
  TeacherStudentPair<double> pair = make_pair(student, 0.5);
  for_each_param(pair.teacher, "", [&](const std::string& name, Tensor<double>& t, bool) {
    INFO(name);
    CHECK_FALSE(t.requires_grad());
  });
  // exact copy at start; sharing no storage with the student
  std::vector<double> before;
  for_each_param(pair.teacher, "", [&](const std::string&, Tensor<double>& t, bool) {
    before.insert(before.end(), t.data().begin(), t.data().end());
  });
  for_each_param(pair.student, "", [&](const std::string&, Tensor<double>& t, bool) {
    for (double& x : t.mutable_data()) x += 1.0;
  });
  ema_update(pair);
  std::size_t i = 0;
  for_each_param(pair.teacher, "", [&](const std::string&, Tensor<double>& t, bool) {
    for (double x : t.data()) {
      CHECK(x == doctest::Approx(before[i] + 0.5).epsilon(1e-14));
      ++i;
    }
  });
  CHECK_THROWS(make_pair(student, 1.5));

  CHECK(openus::testing::ema_law_error(500, 0.996, 6) <= 1e-10);
  CHECK(openus::testing::ema_law_error(50, 0.5, 7) <= 1e-10);
}

TEST_CASE("head gradients") {
  std::mt19937_64 rng(8);
  const auto head = small_head(rng, true);
  const auto tokens = rand_t({3, 6}, rng);
  const auto r = grad_check<double>(
      [&] { return openus::testing::contract(log_softmax_t(head_logits(tokens, head), 0.1)); },
      {tokens, head.fc1.weight, head.fc1.bias, head.fc2.weight, head.fc2.bias, head.prototypes}, 1e-4, 1e-4);
  INFO(r.max_rel_error);
  CHECK(r.passed);
}
