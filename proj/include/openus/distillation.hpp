// SPDX-License-Identifier: Apache-2.0
//
// Projection head, teacher/student pair, centering and the two
// cross-entropy objectives.
#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "openus/encoder.hpp"

namespace openus {

struct HeadConfig {
  std::size_t hidden = 128;
  std::size_t bottleneck = 64;
  std::size_t prototypes = 256;  // K
};

/// fc1 -> silu -> fc2 -> unit rows -> cosine against unit prototype columns.
template <typename T>
struct ProjectionHead {
  Linear<T> fc1;
  Linear<T> fc2;
  Tensor<T> prototypes;  // [bottleneck x K], columns normalized on use
};

template <typename T>
ProjectionHead<T> init_head(std::size_t in_dim, const HeadConfig& config, std::mt19937_64& rng, bool requires_grad);

/// Prototype scores [R x K] for token rows [R x D] (or a single [D] token).
template <typename T>
Tensor<T> head_logits(const Tensor<T>& tokens, const ProjectionHead<T>& head);

/// softmax((logits - center) / tau); `center` may be empty.
template <typename T>
Tensor<T> teacher_probs(const Tensor<T>& logits, std::span<const double> center, T tau);

/// log softmax(logits / tau).
template <typename T>
Tensor<T> student_log_probs(const Tensor<T>& logits, T tau);

/// head_logits followed by the teacher or student normalization; returns
/// probabilities in both cases.
template <typename T>
Tensor<T> head_forward(const Tensor<T>& tokens, const ProjectionHead<T>& head, T tau,
                       std::span<const double> center = {});

/// Encoder plus projection head; the part of the model shared by teacher and
/// student.
template <typename T>
struct Backbone {
  EncoderParams<T> encoder;
  ProjectionHead<T> head;
};

template <typename T, typename Fn>
void for_each_param(Backbone<T>& b, const std::string& prefix, Fn&& fn) {
  for_each_param(b.encoder, prefix + "enc.", fn);
  detail::visit_linear(b.head.fc1, prefix + "head.fc1", fn);
  detail::visit_linear(b.head.fc2, prefix + "head.fc2", fn);
  fn(prefix + "head.prototypes", b.head.prototypes, true);
}

template <typename T>
struct TeacherStudentPair {
  Backbone<T> student;
  Backbone<T> teacher;  // no grad slots
  double lambda = 0.996;
};

/// Teacher starts as an exact copy of the student without gradient tracking.
template <typename T>
TeacherStudentPair<T> make_pair(Backbone<T> student, double lambda);

/// Deep copy of every parameter tensor.
template <typename T>
Backbone<T> clone_backbone(const Backbone<T>& b, bool requires_grad);

/// teacher <- lambda teacher + (1 - lambda) student, elementwise.
template <typename T>
void ema_update(TeacherStudentPair<T>& pair);

struct CenterState {
  std::vector<double> center;
  double decay = 0.9;
};

/// center <- decay center + (1 - decay) batch-mean(scores); scores is [B x K].
void center_update(CenterState& state, std::span<const double> scores, std::size_t rows);

/// Mean over (g, l) pairs of -sum_k p_t^g[k] log p_s^l[k].
/// Teacher rows [G x K] are constants; student rows [L x K] are log-probs.
template <typename T>
Tensor<T> loss_cls(const Tensor<T>& teacher_probs, const Tensor<T>& student_log_probs);

template <typename T>
struct PatchLoss {
  Tensor<T> value;
  std::size_t masked_tokens = 0;
  bool empty = false;  // no masked token; value is 0
};

/// Masked-token cross entropy summed over views and divided by the total
/// number of masked tokens. Per view: teacher [n x K] probs, student [n x K]
/// log-probs, mask of length n.
template <typename T>
PatchLoss<T> loss_patch_mim(const std::vector<Tensor<T>>& teacher_probs, const std::vector<Tensor<T>>& student_log_probs,
                            const std::vector<std::vector<std::uint8_t>>& masks);

/// Maps a stem-grid mask to a grid `levels` 2x2 merges coarser; a window is
/// masked when at least half of its 4 cells are.
std::vector<std::uint8_t> downsample_mask(std::span<const std::uint8_t> mask, std::size_t grid_h, std::size_t grid_w,
                                          std::size_t levels);

/// Entropy (nats) of the row mean of a [B x K] probability matrix.
double mean_distribution_entropy(std::span<const double> probs, std::size_t rows);

}  // namespace openus
