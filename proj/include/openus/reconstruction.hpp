// SPDX-License-Identifier: Apache-2.0
//
// One-layer pixel head and the masked reconstruction losses.
#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "openus/encoder.hpp"

namespace openus {

/// Maps each final-stage token to its f x f pixel block (f = total downsample).
template <typename T>
struct ReconHead {
  Linear<T> proj;  // [D_last x f*f]
  std::size_t block = 0;
};

template <typename T>
ReconHead<T> init_recon_head(std::size_t in_dim, std::size_t block, std::mt19937_64& rng, bool requires_grad);

template <typename T, typename Fn>
void for_each_param(ReconHead<T>& h, const std::string& prefix, Fn&& fn) {
  detail::visit_linear(h.proj, prefix + "recon", fn);
}

/// Predicted image [grid_h*f x grid_w*f] from tokens [grid_h*grid_w x D].
template <typename T>
Tensor<T> reconstruct(const Tensor<T>& tokens, const ReconHead<T>& head, std::size_t grid_h, std::size_t grid_w);

template <typename T>
struct ReconLoss {
  Tensor<T> value;
  std::size_t masked_pixels = 0;
  bool empty = false;  // no masked patch; value is 0
};

/// Mean squared error over the pixels of masked stem patches.
/// pred/target [H x W]; mask on the (H/p) x (W/p) stem grid.
template <typename T>
ReconLoss<T> loss_recon_masked(const Tensor<T>& pred, const Tensor<T>& target, std::span<const std::uint8_t> mask,
                               std::size_t stem_patch);

/// Per-view masked MSE averaged over the views with a non-empty mask.
template <typename T>
ReconLoss<T> loss_recon_views(const std::vector<Tensor<T>>& preds, const std::vector<Tensor<T>>& targets,
                              const std::vector<std::vector<std::uint8_t>>& masks, std::size_t stem_patch);

template <typename T>
ReconLoss<T> loss_recon_global(const std::vector<Tensor<T>>& preds, const std::vector<Tensor<T>>& targets,
                               const std::vector<std::vector<std::uint8_t>>& masks, std::size_t stem_patch) {
  return loss_recon_views(preds, targets, masks, stem_patch);
}

template <typename T>
ReconLoss<T> loss_recon_local(const std::vector<Tensor<T>>& preds, const std::vector<Tensor<T>>& targets,
                              const std::vector<std::vector<std::uint8_t>>& masks, std::size_t stem_patch) {
  return loss_recon_views(preds, targets, masks, stem_patch);
}

struct RecLossMap {
  std::vector<double> per_patch_l2;     // stem grid; 0 where not masked
  std::vector<std::uint8_t> present;    // 1 where masked
  std::vector<std::size_t> descending;  // masked patches, highest loss first
};

/// Per-masked-patch MSE on plain arrays.
RecLossMap rec_loss_map(std::span<const double> pred, std::span<const double> target, std::size_t height,
                        std::size_t width, std::span<const std::uint8_t> mask, std::size_t stem_patch);

template <typename T>
RecLossMap rec_loss_map(const Tensor<T>& pred, const Tensor<T>& target, std::span<const std::uint8_t> mask,
                        std::size_t stem_patch);

}  // namespace openus
