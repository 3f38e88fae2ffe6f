// SPDX-License-Identifier: Apache-2.0
//
// Hierarchical vision state-space encoder.
//
//   image -> stem (p x p patches, linear, mask token, 2-D sine code)
//         -> stage 0: VSS blocks
//         -> stage s > 0: 2x2 token merge (LN + linear), VSS blocks
//         -> final LN -> patch tokens, cls = mean of patch tokens
//
// A VSS block is  x += out(scan(silu(in_x(LN x))) ⊙ silu(in_z(LN x)));
//                 x += mlp(LN x)
// where scan sums one selective scan per traversal order of the token grid.
#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "openus/ops.hpp"
#include "openus/tensor.hpp"

namespace openus {

struct EncoderConfig {
  std::size_t image_size = 64;
  std::size_t stem_patch = 4;
  std::size_t stages = 2;
  std::vector<std::size_t> stage_dims{32, 64};
  std::vector<std::size_t> depths{1, 1};
  std::size_t state_dim = 8;
  std::size_t scan_directions = 2;
  double mlp_ratio = 4.0;
  AttentionForm attention_form = AttentionForm::weighted;

  /// Throws std::invalid_argument on inconsistent settings.
  void validate() const;
  /// Pixels per side covered by one final-stage token.
  std::size_t total_downsample() const;
  /// Stem-grid side for a square image of `pixels`.
  std::size_t stem_grid(std::size_t pixels) const { return pixels / stem_patch; }
};

template <typename T>
struct Linear {
  Tensor<T> weight;  // [in x out]
  Tensor<T> bias;    // [out]
};

template <typename T>
struct Norm {
  Tensor<T> gamma;
  Tensor<T> beta;
};

template <typename T>
struct ScanDirectionParams {
  Linear<T> delta_proj;  // [D x 1]; softplus gives delta > 0
  Linear<T> b_proj;      // [D x N], keys
  Linear<T> c_proj;      // [D x N], queries
  Tensor<T> a_log;       // [N]; A = -exp(a_log) < 0
};

template <typename T>
struct VSSBlockParams {
  Norm<T> ln1;
  Linear<T> in_x;
  Linear<T> in_z;
  std::vector<ScanDirectionParams<T>> directions;
  Linear<T> out_proj;
  Norm<T> ln2;
  Linear<T> mlp_in;
  Linear<T> mlp_out;
};

template <typename T>
struct StageParams {
  Norm<T> merge_norm;  // unused for stage 0
  Linear<T> merge;     // unused for stage 0
  std::vector<VSSBlockParams<T>> blocks;
};

template <typename T>
struct EncoderParams {
  Linear<T> stem;
  Tensor<T> mask_token;  // [D0]
  std::vector<StageParams<T>> stages;
  Norm<T> final_norm;
};

/// Calls fn(name, tensor, decays) for every parameter, in a fixed order.
/// `decays` is false for biases, norms, state matrices and the mask token.
template <typename T, typename Fn>
void for_each_param(EncoderParams<T>& p, const std::string& prefix, Fn&& fn);

template <typename T>
EncoderParams<T> init_encoder(const EncoderConfig& config, std::mt19937_64& rng, bool requires_grad);

/// Token order of one scan direction over a row-major grid.
/// 0: row-major, 1: reversed row-major, 2: column-major, 3: reversed column-major.
std::vector<std::size_t> scan_order(std::size_t grid_h, std::size_t grid_w, std::size_t direction);

/// Fixed 2-D sine/cosine code, [grid_h * grid_w x dim] row-major. The first
/// half of the channels encodes the row, the second half the column.
std::vector<double> position_code(std::size_t grid_h, std::size_t grid_w, std::size_t dim);

/// Stem tokens [T x D0]. `mask` (stem grid, 1 = masked) may be empty.
template <typename T>
Tensor<T> patchify_stem(const Tensor<T>& image, const EncoderConfig& config, const EncoderParams<T>& params,
                        std::span<const std::uint8_t> mask);

/// Per-token quantities of one scan direction, in scan order.
template <typename T>
struct ScanProjections {
  Tensor<T> u;      // [T x D]
  Tensor<T> delta;  // [T]
  Tensor<T> a;      // [N]
  Tensor<T> b;      // [T x N], keys
  Tensor<T> c;      // [T x N], queries
};

template <typename T>
ScanProjections<T> scan_projections(const Tensor<T>& tokens, const ScanDirectionParams<T>& params,
                                    std::span<const std::size_t> order);

/// One direction of the selective scan over `tokens` ([T x D], grid order):
/// reorder, run the recurrence, restore grid order.
template <typename T>
Tensor<T> selective_scan(const Tensor<T>& tokens, const ScanDirectionParams<T>& params, std::size_t grid_h,
                         std::size_t grid_w, std::size_t direction);

template <typename T>
struct AttentionFormResult {
  Tensor<T> y;          // grid order, same as selective_scan
  Tensor<T> attention;  // [T x T], scan order
};

/// Same output as selective_scan, computed as [(Q ⊙ w)(K / w)^T ⊙ M] (delta ⊙ u).
template <typename T>
AttentionFormResult<T> ssm_attention_form(const Tensor<T>& tokens, const ScanDirectionParams<T>& params,
                                          std::size_t grid_h, std::size_t grid_w, std::size_t direction);

/// Decay weights and masks of one direction, for inspection.
struct ScanIntermediates {
  std::size_t length = 0, states = 0;
  std::vector<double> log_w;  // [T x N], cumulative sum of delta_i * a
  std::vector<double> w;      // exp(log_w); throws std::range_error on underflow
  std::vector<std::uint8_t> causal_mask;  // [T x T], 1 iff j <= i
};

template <typename T>
ScanIntermediates scan_intermediates(const ScanProjections<T>& proj);

/// Attention matrix kept from a block for attention-map extraction.
struct RetainedAttention {
  std::size_t length = 0;
  std::vector<double> matrix;       // [T x T], scan order
  std::vector<std::size_t> order;   // scan position -> grid token
};

template <typename T>
Tensor<T> vss_block(const Tensor<T>& x, const VSSBlockParams<T>& params, std::size_t grid_h, std::size_t grid_w,
                    AttentionForm form = AttentionForm::weighted, std::vector<RetainedAttention>* retain = nullptr);

template <typename T>
struct EncoderOutput {
  Tensor<T> patch_tokens;  // [grid_h * grid_w x D_last]
  Tensor<T> cls_token;     // [D_last]
  std::vector<Tensor<T>> stage_features;
  std::size_t grid_h = 0, grid_w = 0;
  std::size_t stem_h = 0, stem_w = 0;
  std::vector<RetainedAttention> last_attention;  // filled when requested
};

template <typename T>
EncoderOutput<T> encode(const Tensor<T>& image, const EncoderConfig& config, const EncoderParams<T>& params,
                        std::span<const std::uint8_t> mask = {}, bool keep_attention = false);

struct AttentionMap {
  std::vector<double> scores;  // stem grid, min-max normalized
  std::size_t grid_h = 0, grid_w = 0;
  bool constant = false;       // flat input; scores are all 0.5
};

/// Attention received per token (column mean of the retained matrices,
/// averaged over directions), replicated onto the stem grid and min-max
/// normalized.
template <typename T>
AttentionMap extract_attention_map(const EncoderOutput<T>& output);

/// Min-max normalization to [0, 1]; a constant input maps to all 0.5 and
/// sets *constant.
std::vector<double> min_max_normalize(std::span<const double> values, bool* constant = nullptr);

// -- implementation of the param walk -------------------------------------

namespace detail {
template <typename T, typename Fn>
void visit_linear(Linear<T>& l, const std::string& name, Fn& fn) {
  fn(name + ".weight", l.weight, true);
  if (l.bias.defined()) fn(name + ".bias", l.bias, false);
}
template <typename T, typename Fn>
void visit_norm(Norm<T>& n, const std::string& name, Fn& fn) {
  fn(name + ".gamma", n.gamma, false);
  fn(name + ".beta", n.beta, false);
}
}  // namespace detail

template <typename T, typename Fn>
void for_each_param(EncoderParams<T>& p, const std::string& prefix, Fn&& fn) {
  detail::visit_linear(p.stem, prefix + "stem", fn);
  fn(prefix + "mask_token", p.mask_token, false);
  for (std::size_t s = 0; s < p.stages.size(); ++s) {
    auto& st = p.stages[s];
    const std::string sn = prefix + "s" + std::to_string(s);
    if (s > 0) {
      detail::visit_norm(st.merge_norm, sn + ".merge_norm", fn);
      detail::visit_linear(st.merge, sn + ".merge", fn);
    }
    for (std::size_t b = 0; b < st.blocks.size(); ++b) {
      auto& bl = st.blocks[b];
      const std::string bn = sn + ".b" + std::to_string(b);
      detail::visit_norm(bl.ln1, bn + ".ln1", fn);
      detail::visit_linear(bl.in_x, bn + ".in_x", fn);
      detail::visit_linear(bl.in_z, bn + ".in_z", fn);
      for (std::size_t d = 0; d < bl.directions.size(); ++d) {
        auto& dir = bl.directions[d];
        const std::string dn = bn + ".dir" + std::to_string(d);
        detail::visit_linear(dir.delta_proj, dn + ".delta", fn);
        detail::visit_linear(dir.b_proj, dn + ".b", fn);
        detail::visit_linear(dir.c_proj, dn + ".c", fn);
        fn(dn + ".a_log", dir.a_log, false);
      }
      detail::visit_linear(bl.out_proj, bn + ".out", fn);
      detail::visit_norm(bl.ln2, bn + ".ln2", fn);
      detail::visit_linear(bl.mlp_in, bn + ".mlp_in", fn);
      detail::visit_linear(bl.mlp_out, bn + ".mlp_out", fn);
    }
  }
  detail::visit_norm(p.final_norm, prefix + "final_norm", fn);
}

}  // namespace openus
