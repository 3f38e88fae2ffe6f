// SPDX-License-Identifier: Apache-2.0
#include "openus/reconstruction.hpp"

#include <cmath>
#include <stdexcept>

#include "openus/masking.hpp"

namespace openus {

template <typename T>
ReconHead<T> init_recon_head(std::size_t in_dim, std::size_t block, std::mt19937_64& rng, bool requires_grad) {
  std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(in_dim)));
  std::vector<T> w(in_dim * block * block);
  for (T& x : w) x = static_cast<T>(dist(rng));
  ReconHead<T> h;
  h.block = block;
  h.proj.weight = Tensor<T>({in_dim, block * block}, std::move(w), requires_grad);
  h.proj.bias = Tensor<T>::zeros({block * block}, requires_grad);
  return h;
}

template <typename T>
Tensor<T> reconstruct(const Tensor<T>& tokens, const ReconHead<T>& head, std::size_t grid_h, std::size_t grid_w) {
  if (tokens.rank() != 2 || tokens.size(0) != grid_h * grid_w)
    throw ShapeError("reconstruct: tokens " + shape_str(tokens.shape()) + " do not match the grid");
  const std::size_t f = head.block;
  if (head.proj.weight.size(1) != f * f) throw ShapeError("reconstruct: head width is not block^2");
  const Tensor<T> blocks = linear(tokens, head.proj.weight, head.proj.bias);  // [n x f*f]
  const std::size_t h = grid_h * f, w = grid_w * f;
  std::vector<std::size_t> index(h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) index[y * w + x] = ((y / f) * grid_w + x / f) * f * f + (y % f) * f + x % f;
  return reshape(gather(reshape(blocks, {grid_h * grid_w * f * f, 1}), index), {h, w});
}

namespace {
std::vector<double> pixel_weights(std::size_t h, std::size_t w, std::span<const std::uint8_t> mask, std::size_t p,
                                  std::size_t* count) {
  if (p == 0 || h % p || w % p) throw ShapeError("image is not divisible by the stem patch");
  const std::size_t gw = w / p;
  if (mask.size() != (h / p) * gw) throw ShapeError("mask does not match the stem grid");
  std::vector<double> weights(h * w, 0.0);
  *count = 0;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      if (mask[(y / p) * gw + x / p]) {
        weights[y * w + x] = 1.0;
        ++*count;
      }
  return weights;
}
}  // namespace

template <typename T>
ReconLoss<T> loss_recon_masked(const Tensor<T>& pred, const Tensor<T>& target, std::span<const std::uint8_t> mask,
                               std::size_t stem_patch) {
  if (pred.shape() != target.shape() || pred.rank() != 2) throw ShapeError("loss_recon: pred/target mismatch");
  ReconLoss<T> out;
  const std::vector<double> wts = pixel_weights(pred.size(0), pred.size(1), mask, stem_patch, &out.masked_pixels);
  if (out.masked_pixels == 0) {
    out.empty = true;
    out.value = Tensor<T>::scalar(T(0));
    return out;
  }
  const Tensor<T> diff = sub(pred, target.detach());
  const Tensor<T> weights(pred.shape(), std::vector<T>(wts.begin(), wts.end()));
  out.value = mul_scalar(sum(mul(mul(diff, diff), weights)), T(1) / static_cast<T>(out.masked_pixels));
  return out;
}

template <typename T>
ReconLoss<T> loss_recon_views(const std::vector<Tensor<T>>& preds, const std::vector<Tensor<T>>& targets,
                              const std::vector<std::vector<std::uint8_t>>& masks, std::size_t stem_patch) {
  if (preds.size() != targets.size() || preds.size() != masks.size())
    throw std::invalid_argument("loss_recon: view lists differ in length");
  ReconLoss<T> out;
  Tensor<T> total;
  std::size_t views = 0;
  for (std::size_t v = 0; v < preds.size(); ++v) {
    ReconLoss<T> one = loss_recon_masked(preds[v], targets[v], masks[v], stem_patch);
    if (one.empty) continue;
    out.masked_pixels += one.masked_pixels;
    total = total.defined() ? add(total, one.value) : one.value;
    ++views;
  }
  if (views == 0) {
    out.empty = true;
    out.value = Tensor<T>::scalar(T(0));
    return out;
  }
  out.value = mul_scalar(total, T(1) / static_cast<T>(views));
  return out;
}

RecLossMap rec_loss_map(std::span<const double> pred, std::span<const double> target, std::size_t height,
                        std::size_t width, std::span<const std::uint8_t> mask, std::size_t p) {
  if (pred.size() != height * width || target.size() != pred.size()) throw ShapeError("rec_loss_map: size mismatch");
  std::size_t count = 0;
  pixel_weights(height, width, mask, p, &count);
  const std::size_t gw = width / p;
  RecLossMap m;
  m.per_patch_l2.assign(mask.size(), 0.0);
  m.present.assign(mask.begin(), mask.end());
  for (std::size_t t = 0; t < mask.size(); ++t) {
    if (!mask[t]) continue;
    const std::size_t r0 = (t / gw) * p, c0 = (t % gw) * p;
    double acc = 0;
    for (std::size_t y = r0; y < r0 + p; ++y)
      for (std::size_t x = c0; x < c0 + p; ++x) {
        const double d = pred[y * width + x] - target[y * width + x];
        acc += d * d;
      }
    m.per_patch_l2[t] = acc / static_cast<double>(p * p);
  }
  for (std::size_t i : argsort_descending(m.per_patch_l2))
    if (mask[i]) m.descending.push_back(i);
  return m;
}

template <typename T>
RecLossMap rec_loss_map(const Tensor<T>& pred, const Tensor<T>& target, std::span<const std::uint8_t> mask,
                        std::size_t stem_patch) {
  if (pred.shape() != target.shape() || pred.rank() != 2) throw ShapeError("rec_loss_map: pred/target mismatch");
  const std::vector<double> p(pred.data().begin(), pred.data().end());
  const std::vector<double> t(target.data().begin(), target.data().end());
  return rec_loss_map(p, t, pred.size(0), pred.size(1), mask, stem_patch);
}

#define OPENUS_INSTANTIATE(T)                                                                                   \
  template ReconHead<T> init_recon_head<T>(std::size_t, std::size_t, std::mt19937_64&, bool);                  \
  template Tensor<T> reconstruct<T>(const Tensor<T>&, const ReconHead<T>&, std::size_t, std::size_t);          \
  template ReconLoss<T> loss_recon_masked<T>(const Tensor<T>&, const Tensor<T>&, std::span<const std::uint8_t>, \
                                             std::size_t);                                                     \
  template ReconLoss<T> loss_recon_views<T>(const std::vector<Tensor<T>>&, const std::vector<Tensor<T>>&,      \
                                            const std::vector<std::vector<std::uint8_t>>&, std::size_t);       \
  template RecLossMap rec_loss_map<T>(const Tensor<T>&, const Tensor<T>&, std::span<const std::uint8_t>,       \
                                      std::size_t);

OPENUS_INSTANTIATE(float)
OPENUS_INSTANTIATE(double)
#undef OPENUS_INSTANTIATE

}  // namespace openus
