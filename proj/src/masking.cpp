// SPDX-License-Identifier: Apache-2.0
#include "openus/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>

#include "openus/encoder.hpp"

namespace openus {

namespace {
constexpr double kCountSlack = 1e-9;

void fill_provenance(MaskPlan& plan) {
  plan.n_masked = 0;
  for (std::uint8_t m : plan.grid) plan.n_masked += m;
}

// Draws k distinct elements of `pool` (partial Fisher-Yates).
std::vector<std::size_t> draw(std::vector<std::size_t> pool, std::size_t k, std::mt19937_64& rng) {
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(k);
  return pool;
}
}  // namespace

std::size_t mask_count(std::size_t n, double ratio) {
  return static_cast<std::size_t>(std::ceil(static_cast<double>(n) * ratio - kCountSlack));
}

std::size_t top_count(std::size_t n, double ratio) {
  return static_cast<std::size_t>(std::floor(static_cast<double>(n) * ratio + kCountSlack));
}

void MaskScheduleState::validate() const {
  if (T == 0) throw std::invalid_argument("schedule needs T > 0");
  if (t > T) throw std::invalid_argument("schedule step t exceeds T");
  if (!(0 <= r0 && r0 <= rT && rT <= 1)) throw std::invalid_argument("need 0 <= r0 <= rT <= 1");
  if (!(0 <= alpha_min && alpha_min <= alpha_max && alpha_max <= 1))
    throw std::invalid_argument("need 0 <= alpha_min <= alpha_max <= 1");
}

double ratio_schedule(const MaskScheduleState& s) {
  s.validate();
  if (s.t == s.T) return s.rT;
  return s.r0 + (static_cast<double>(s.t) / static_cast<double>(s.T)) * (s.rT - s.r0);
}

double alpha_schedule(const MaskScheduleState& s) {
  s.validate();
  if (s.t == 0) return s.alpha_min;
  if (s.t == s.T) return s.alpha_max;
  const double phase = std::numbers::pi * static_cast<double>(s.t) / static_cast<double>(s.T);
  return s.alpha_max - (s.alpha_max - s.alpha_min) * (1 + std::cos(phase)) / 2;
}

ALPMap compute_alp(std::span<const double> am, std::span<const double> rec, double alpha) {
  if (am.size() != rec.size()) throw std::invalid_argument("ALP inputs differ in length");
  if (!(alpha >= 0 && alpha <= 1)) throw std::invalid_argument("alpha must lie in [0, 1]");
  ALPMap m;
  m.alpha_used = alpha;
  m.am_norm = min_max_normalize(am, &m.am_constant);
  m.rec_norm = min_max_normalize(rec, &m.rec_constant);
  m.scores.resize(am.size());
  for (std::size_t i = 0; i < am.size(); ++i) m.scores[i] = (1 - alpha) * m.am_norm[i] + alpha * m.rec_norm[i];
  return m;
}

std::vector<std::size_t> argsort_descending(std::span<const double> scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return idx;
}

MaskPlan self_adaptive_mask(std::span<const double> scores, std::size_t grid_h, std::size_t grid_w, double rat_m,
                            double thr_m, std::mt19937_64& rng) {
  const std::size_t n = scores.size();
  if (n != grid_h * grid_w) throw std::invalid_argument("ALP length does not match the grid");
  if (!(rat_m > 0) || rat_m > 1) throw std::invalid_argument("masking ratio must lie in (0, 1]");
  if (thr_m < 0 || thr_m > rat_m) throw std::invalid_argument("masking threshold must lie in [0, rat_m]");

  MaskPlan plan = empty_mask(grid_h, grid_w);
  const std::size_t n_mask = mask_count(n, rat_m);
  const std::size_t top_k = top_count(n, thr_m);
  const std::vector<std::size_t> order = argsort_descending(scores);
  const std::size_t from_alp = std::min(top_k, n_mask);
  plan.alp_driven_idx.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(from_alp));
  if (from_alp < n_mask) {
    std::vector<std::size_t> rest(order.begin() + static_cast<std::ptrdiff_t>(from_alp), order.end());
    std::sort(rest.begin(), rest.end());
    plan.random_idx = draw(std::move(rest), n_mask - from_alp, rng);
    std::sort(plan.random_idx.begin(), plan.random_idx.end());
  }
  for (std::size_t i : plan.alp_driven_idx) plan.grid[i] = 1;
  for (std::size_t i : plan.random_idx) plan.grid[i] = 1;
  fill_provenance(plan);
  return plan;
}

MaskPlan self_adaptive_mask(const ALPMap& alp, std::size_t grid_h, std::size_t grid_w, double rat_m, double thr_m,
                            std::mt19937_64& rng) {
  return self_adaptive_mask(alp.scores, grid_h, grid_w, rat_m, thr_m, rng);
}

MaskPlan empty_mask(std::size_t grid_h, std::size_t grid_w) {
  MaskPlan plan;
  plan.grid_h = grid_h;
  plan.grid_w = grid_w;
  plan.grid.assign(grid_h * grid_w, 0);
  return plan;
}

MaskPlan uniform_random_mask(std::size_t grid_h, std::size_t grid_w, double ratio, std::mt19937_64& rng) {
  if (!(ratio > 0) || ratio > 1) throw std::invalid_argument("masking ratio must lie in (0, 1]");
  MaskPlan plan = empty_mask(grid_h, grid_w);
  const std::size_t n = plan.size();
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), 0);
  plan.random_idx = draw(std::move(all), mask_count(n, ratio), rng);
  std::sort(plan.random_idx.begin(), plan.random_idx.end());
  for (std::size_t i : plan.random_idx) plan.grid[i] = 1;
  fill_provenance(plan);
  return plan;
}

MaskPlan random_blockwise_mask(std::size_t grid_h, std::size_t grid_w, double ratio, std::mt19937_64& rng) {
  if (!(ratio > 0) || ratio > 1) throw std::invalid_argument("masking ratio must lie in (0, 1]");
  const std::size_t n = grid_h * grid_w;
  if (n < 4) return uniform_random_mask(grid_h, grid_w, ratio, rng);

  MaskPlan plan = empty_mask(grid_h, grid_w);
  const std::size_t target = mask_count(n, ratio);
  std::size_t count = 0;
  if (target == n) {
    std::fill(plan.grid.begin(), plan.grid.end(), 1);
    count = n;
  }
  const double max_area = std::max(4.0, 0.4 * static_cast<double>(n));
  std::uniform_real_distribution<double> area_dist(4.0, max_area);
  std::uniform_real_distribution<double> log_aspect(std::log(0.3), std::log(1 / 0.3));
  while (count < target) {
    const double area = area_dist(rng);
    const double aspect = std::exp(log_aspect(rng));
    const auto h = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(std::sqrt(area * aspect))), 1, grid_h);
    const auto w = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(std::sqrt(area / aspect))), 1, grid_w);
    // Placements may overhang the border and are clipped, so every cell is
    // covered by the same number of placements.
    const auto hi = static_cast<std::ptrdiff_t>(h), wi = static_cast<std::ptrdiff_t>(w);
    std::uniform_int_distribution<std::ptrdiff_t> top_dist(1 - hi, static_cast<std::ptrdiff_t>(grid_h) - 1);
    std::uniform_int_distribution<std::ptrdiff_t> left_dist(1 - wi, static_cast<std::ptrdiff_t>(grid_w) - 1);
    const std::ptrdiff_t top = top_dist(rng), left = left_dist(rng);
    const auto r0 = static_cast<std::size_t>(std::max<std::ptrdiff_t>(top, 0));
    const auto c0 = static_cast<std::size_t>(std::max<std::ptrdiff_t>(left, 0));
    const auto r1 = std::min(grid_h, static_cast<std::size_t>(top + hi));
    const auto c1 = std::min(grid_w, static_cast<std::size_t>(left + wi));
    for (std::size_t r = r0; r < r1; ++r)
      for (std::size_t c = c0; c < c1; ++c) {
        std::uint8_t& m = plan.grid[r * grid_w + c];
        if (!m) {
          m = 1;
          ++count;
        }
      }
  }
  if (count > target) {
    std::vector<std::size_t> masked;
    for (std::size_t i = 0; i < n; ++i)
      if (plan.grid[i]) masked.push_back(i);
    for (std::size_t i : draw(std::move(masked), count - target, rng)) plan.grid[i] = 0;
  }
  for (std::size_t i = 0; i < n; ++i)
    if (plan.grid[i]) plan.random_idx.push_back(i);
  fill_provenance(plan);
  return plan;
}

RecLossEMA::RecLossEMA(double decay) : decay_(decay) {
  if (!(decay >= 0 && decay < 1)) throw std::invalid_argument("EMA decay must lie in [0, 1)");
}

void RecLossEMA::update(const std::string& image_id, std::span<const double> loss,
                        std::span<const std::uint8_t> present) {
  if (loss.size() != present.size()) throw std::invalid_argument("loss and presence vectors differ in length");
  for (std::size_t i = 0; i < loss.size(); ++i)
    if (present[i] && !(loss[i] >= 0)) throw std::invalid_argument("reconstruction loss must be non-negative");
  Entry& e = entries_[image_id];
  if (e.loss.empty()) {
    e.loss.assign(loss.size(), 0.0);
    e.observed.assign(loss.size(), 0);
  }
  if (e.loss.size() != loss.size()) throw std::invalid_argument("loss map size changed for " + image_id);
  for (std::size_t i = 0; i < loss.size(); ++i) {
    if (!present[i]) continue;
    e.loss[i] = e.observed[i] ? decay_ * e.loss[i] + (1 - decay_) * loss[i] : loss[i];
    e.observed[i] = 1;
  }
}

const RecLossEMA::Entry* RecLossEMA::find(const std::string& image_id) const {
  auto it = entries_.find(image_id);
  return it == entries_.end() ? nullptr : &it->second;
}

std::vector<double> RecLossEMA::filled(const std::string& image_id) const {
  const Entry* e = find(image_id);
  if (!e) return {};
  double total = 0;
  std::size_t seen = 0;
  for (std::size_t i = 0; i < e->loss.size(); ++i)
    if (e->observed[i]) total += e->loss[i], ++seen;
  if (seen == 0) return {};
  const double fill = total / static_cast<double>(seen);
  std::vector<double> out(e->loss.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = e->observed[i] ? e->loss[i] : fill;
  return out;
}

void RecLossEMA::restore(const std::string& image_id, Entry entry) { entries_[image_id] = std::move(entry); }

void update_rec_loss_ema(RecLossEMA& store, const std::string& image_id, std::span<const double> per_patch_loss,
                         std::span<const std::uint8_t> present) {
  store.update(image_id, per_patch_loss, present);
}

}  // namespace openus
