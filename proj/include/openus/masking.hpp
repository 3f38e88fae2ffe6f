// SPDX-License-Identifier: Apache-2.0
//
// Mask generators (self-adaptive, random blockwise, uniform), the ALP score,
// the per-image reconstruction-loss EMA and the two epoch schedules.
#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace openus {

struct MaskPlan {
  std::size_t grid_h = 0, grid_w = 0;
  std::vector<std::uint8_t> grid;  // 1 = masked
  std::size_t n_masked = 0;
  std::vector<std::size_t> alp_driven_idx;
  std::vector<std::size_t> random_idx;

  std::size_t size() const { return grid.size(); }
};

/// ceil(n * ratio), robust to representation error in `ratio`.
std::size_t mask_count(std::size_t n, double ratio);
/// floor(n * ratio), same tolerance.
std::size_t top_count(std::size_t n, double ratio);

struct MaskScheduleState {
  std::size_t t = 0;
  std::size_t T = 1;
  double r0 = 0.1, rT = 0.9;
  double alpha_min = 0.1, alpha_max = 0.9;

  void validate() const;
};

/// r_t = r0 + (t / T)(rT - r0).
double ratio_schedule(const MaskScheduleState& s);
/// Cosine ramp from alpha_min (t = 0) to alpha_max (t = T).
double alpha_schedule(const MaskScheduleState& s);

struct ALPMap {
  std::vector<double> scores;
  std::vector<double> am_norm;
  std::vector<double> rec_norm;
  double alpha_used = 0;
  bool am_constant = false;
  bool rec_constant = false;
};

/// (1 - alpha) * minmax(am) + alpha * minmax(rec).
ALPMap compute_alp(std::span<const double> am, std::span<const double> rec, double alpha);

/// Indices sorted by descending score, ties by lower index.
std::vector<std::size_t> argsort_descending(std::span<const double> scores);

/// Masks ceil(N rat_m) patches: the floor(N thr_m) highest-ALP ones, the rest
/// uniformly from the remainder.
MaskPlan self_adaptive_mask(std::span<const double> scores, std::size_t grid_h, std::size_t grid_w, double rat_m,
                            double thr_m, std::mt19937_64& rng);
MaskPlan self_adaptive_mask(const ALPMap& alp, std::size_t grid_h, std::size_t grid_w, double rat_m, double thr_m,
                            std::mt19937_64& rng);

/// Union of random rectangles, trimmed to exactly ceil(N ratio) patches.
/// Grids with fewer than 4 patches fall back to uniform_random_mask.
MaskPlan random_blockwise_mask(std::size_t grid_h, std::size_t grid_w, double ratio, std::mt19937_64& rng);

MaskPlan uniform_random_mask(std::size_t grid_h, std::size_t grid_w, double ratio, std::mt19937_64& rng);

MaskPlan empty_mask(std::size_t grid_h, std::size_t grid_w);

/// Per-image EMA of the per-patch reconstruction loss.
class RecLossEMA {
 public:
  struct Entry {
    std::vector<double> loss;
    std::vector<std::uint8_t> observed;
  };

  explicit RecLossEMA(double decay = 0.9);

  double decay() const { return decay_; }
  /// EMA at the patches flagged in `present`; first observations are stored as is.
  void update(const std::string& image_id, std::span<const double> loss, std::span<const std::uint8_t> present);
  const Entry* find(const std::string& image_id) const;
  /// Loss vector with unobserved patches set to the mean of the observed ones.
  /// Empty when the image has no observation yet.
  std::vector<double> filled(const std::string& image_id) const;

  const std::map<std::string, Entry>& entries() const { return entries_; }
  void restore(const std::string& image_id, Entry entry);
  void clear() { entries_.clear(); }

 private:
  double decay_;
  std::map<std::string, Entry> entries_;
};

void update_rec_loss_ema(RecLossEMA& store, const std::string& image_id, std::span<const double> per_patch_loss,
                         std::span<const std::uint8_t> present);

}  // namespace openus
