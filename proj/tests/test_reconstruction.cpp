// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "openus/reconstruction.hpp"
#include "support.hpp"

using namespace openus;
using openus::testing::rand_t;

TEST_CASE("reconstruct places blocks on the pixel grid") {
  // 2x3 grid of tokens, block 2; identity-like head reading token values
  ReconHead<double> head;
  head.block = 2;
  head.proj.weight = Tensor<double>({4, 4}, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1});
  head.proj.bias = Tensor<double>::zeros({4});
  std::vector<double> tok(6 * 4);
  for (std::size_t t = 0; t < 6; ++t)
    for (std::size_t k = 0; k < 4; ++k) tok[t * 4 + k] = 10.0 * static_cast<double>(t) + static_cast<double>(k);
  const auto img = reconstruct(Tensor<double>({6, 4}, tok), head, 2, 3);
  CHECK(img.shape() == Shape{4, 6});
  CHECK(img[0 * 6 + 0] == 0);
  CHECK(img[0 * 6 + 1] == 1);
  CHECK(img[1 * 6 + 0] == 2);
  CHECK(img[1 * 6 + 1] == 3);
  CHECK(img[0 * 6 + 2] == 10);
  CHECK(img[3 * 6 + 5] == 53);
  CHECK_THROWS_AS(reconstruct(Tensor<double>({5, 4}, std::vector<double>(20)), head, 2, 3), ShapeError);
}

TEST_CASE("masked reconstruction loss") {
  std::mt19937_64 rng(1);
  const auto pred = rand_t({4, 4}, rng, 0, 1, false), target = rand_t({4, 4}, rng, 0, 1, false);
  const std::vector<std::uint8_t> mask{0, 1, 1, 0};  // stem patch 2
  double brute = 0;
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x)
      if (mask[(y / 2) * 2 + x / 2]) brute += (pred[y * 4 + x] - target[y * 4 + x]) * (pred[y * 4 + x] - target[y * 4 + x]);
  const auto r = loss_recon_masked(pred, target, mask, 2);
  CHECK(r.masked_pixels == 8);
  CHECK(r.value.item() == doctest::Approx(brute / 8).epsilon(1e-12));
  CHECK(loss_recon_masked(pred, pred, mask, 2).value.item() == 0.0);
  const auto e = loss_recon_masked(pred, target, std::vector<std::uint8_t>(4, 0), 2);
  CHECK(e.empty);
  CHECK_THROWS_AS(loss_recon_masked(pred, target, std::vector<std::uint8_t>(3, 1), 2), ShapeError);
  CHECK_THROWS_AS(loss_recon_masked(pred, target, mask, 3), ShapeError);

  // views: mean over views with a non-empty mask
  const auto v = loss_recon_views<double>({pred, pred}, {target, target}, {mask, {0, 0, 0, 0}}, 2);
  CHECK(v.value.item() == doctest::Approx(brute / 8).epsilon(1e-12));
  CHECK(loss_recon_global<double>({pred}, {target}, {{0, 0, 0, 0}}, 2).empty);

  // three masked patches
  const std::vector<std::uint8_t> three{1, 1, 0, 1};
  double b3 = 0;
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x)
      if (three[(y / 2) * 2 + x / 2]) b3 += std::pow(pred[y * 4 + x] - target[y * 4 + x], 2);
  CHECK(loss_recon_masked(pred, target, three, 2).value.item() == doctest::Approx(b3 / 12).epsilon(1e-12));

  // eight local views
  std::vector<Tensor<double>> ps, ts;
  std::vector<std::vector<std::uint8_t>> ms;
  double per_view = 0;
  for (int k = 0; k < 8; ++k) {
    ps.push_back(rand_t({4, 4}, rng, 0, 1, false));
    ts.push_back(rand_t({4, 4}, rng, 0, 1, false));
    ms.push_back({static_cast<std::uint8_t>(k % 2), 1, 0, static_cast<std::uint8_t>(k % 3 == 0)});
    per_view += loss_recon_masked(ps.back(), ts.back(), ms.back(), 2).value.item();
  }
  CHECK(loss_recon_local(ps, ts, ms, 2).value.item() == doctest::Approx(per_view / 8).epsilon(1e-12));

  const RecLossMap m = rec_loss_map(pred, target, mask, 2);
  CHECK(m.per_patch_l2[0] == 0.0);
  CHECK(m.present == mask);
  CHECK(m.per_patch_l2[1] + m.per_patch_l2[2] == doctest::Approx(brute / 4).epsilon(1e-12));
  REQUIRE(m.descending.size() == 2);
  CHECK(m.per_patch_l2[m.descending[0]] >= m.per_patch_l2[m.descending[1]]);
}

TEST_CASE("reconstruction gradients") {
  std::mt19937_64 rng(2);
  ReconHead<double> head = init_recon_head<double>(5, 2, rng, true);
  const auto tokens = rand_t({4, 5}, rng);
  const auto target = rand_t({4, 4}, rng, 0, 1, false);
  const std::vector<std::uint8_t> mask{1, 0, 1, 1};
  const auto r = grad_check<double>(
      [&] { return loss_recon_masked(reconstruct(tokens, head, 2, 2), target, mask, 2).value; },
      {tokens, head.proj.weight, head.proj.bias}, 1e-4, 1e-4);
  CHECK(r.passed);
  // target is a constant
  Tape<double> tape;
  Tape<double>::Scope scope(tape);
  const auto t2 = rand_t({4, 4}, rng);
  backward(loss_recon_masked(reconstruct(tokens, head, 2, 2), t2, mask, 2).value);
  for (double g : t2.grad()) CHECK(g == 0.0);
}
