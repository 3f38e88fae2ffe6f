// SPDX-License-Identifier: Apache-2.0
#include "openus/distillation.hpp"

#include <cmath>
#include <stdexcept>

namespace openus {

template <typename T>
ProjectionHead<T> init_head(std::size_t in_dim, const HeadConfig& config, std::mt19937_64& rng, bool requires_grad) {
  auto normal = [&](Shape shape, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<T> v(shape_numel(shape));
    for (T& x : v) x = static_cast<T>(dist(rng));
    return Tensor<T>(std::move(shape), std::move(v), requires_grad);
  };
  ProjectionHead<T> h;
  h.fc1 = {normal({in_dim, config.hidden}, 1.0 / std::sqrt(double(in_dim))),
           Tensor<T>::zeros({config.hidden}, requires_grad)};
  h.fc2 = {normal({config.hidden, config.bottleneck}, 1.0 / std::sqrt(double(config.hidden))),
           Tensor<T>::zeros({config.bottleneck}, requires_grad)};
  h.prototypes = normal({config.bottleneck, config.prototypes}, 1.0);
  return h;
}

template <typename T>
Tensor<T> head_logits(const Tensor<T>& tokens, const ProjectionHead<T>& head) {
  const Tensor<T> rows = tokens.rank() == 1 ? reshape(tokens, {1, tokens.numel()}) : tokens;
  const Tensor<T> hidden = silu(linear(rows, head.fc1.weight, head.fc1.bias));
  const Tensor<T> z = l2_normalize_rows(linear(hidden, head.fc2.weight, head.fc2.bias));
  const Tensor<T> protos = transpose(l2_normalize_rows(transpose(head.prototypes)));
  return matmul(z, protos);
}

template <typename T>
Tensor<T> teacher_probs(const Tensor<T>& logits, std::span<const double> center, T tau) {
  if (center.empty()) return softmax_t(logits, tau);
  const std::size_t k = logits.shape().back();
  if (center.size() != k) throw ShapeError("center length does not match the prototype count");
  const std::size_t rows = logits.numel() / k;
  std::vector<T> c(rows * k);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < k; ++j) c[r * k + j] = static_cast<T>(center[j]);
  return softmax_t(sub(logits, Tensor<T>(logits.shape(), std::move(c))), tau);
}

template <typename T>
Tensor<T> student_log_probs(const Tensor<T>& logits, T tau) {
  return log_softmax_t(logits, tau);
}

template <typename T>
Tensor<T> head_forward(const Tensor<T>& tokens, const ProjectionHead<T>& head, T tau, std::span<const double> center) {
  if (!(tau > 0)) throw DomainError("temperature must be positive");
  return teacher_probs(head_logits(tokens, head), center, tau);
}

template <typename T>
Backbone<T> clone_backbone(const Backbone<T>& b, bool requires_grad) {
  Backbone<T> copy = b;
  for_each_param(copy, "", [&](const std::string&, Tensor<T>& t, bool) { t = t.clone(requires_grad); });
  return copy;
}

template <typename T>
TeacherStudentPair<T> make_pair(Backbone<T> student, double lambda) {
  if (!(lambda >= 0 && lambda <= 1)) throw std::invalid_argument("EMA momentum must lie in [0, 1]");
  TeacherStudentPair<T> pair;
  pair.teacher = clone_backbone(student, false);
  pair.student = std::move(student);
  pair.lambda = lambda;
  return pair;
}

template <typename T>
void ema_update(TeacherStudentPair<T>& pair) {
  std::vector<Tensor<T>> student;
  for_each_param(pair.student, "", [&](const std::string&, Tensor<T>& t, bool) { student.push_back(t); });
  std::size_t i = 0;
  const T lambda = static_cast<T>(pair.lambda);
  for_each_param(pair.teacher, "", [&](const std::string& name, Tensor<T>& t, bool) {
    if (i >= student.size() || student[i].shape() != t.shape()) throw ShapeError("teacher/student drift at " + name);
    std::span<T> dst = t.mutable_data();
    std::span<const T> src = student[i].data();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = lambda * dst[k] + (T(1) - lambda) * src[k];
    ++i;
  });
  if (i != student.size()) throw ShapeError("teacher/student parameter counts differ");
}

void center_update(CenterState& state, std::span<const double> scores, std::size_t rows) {
  if (rows == 0) return;
  const std::size_t k = scores.size() / rows;
  if (k * rows != scores.size()) throw ShapeError("scores are not [rows x K]");
  if (state.center.empty()) state.center.assign(k, 0.0);
  if (state.center.size() != k) throw ShapeError("center length does not match the prototype count");
  for (std::size_t j = 0; j < k; ++j) {
    double m = 0;
    for (std::size_t r = 0; r < rows; ++r) m += scores[r * k + j];
    m /= static_cast<double>(rows);
    state.center[j] = state.decay * state.center[j] + (1 - state.decay) * m;
  }
}

template <typename T>
Tensor<T> loss_cls(const Tensor<T>& teacher, const Tensor<T>& student) {
  if (teacher.numel() == 0 || student.numel() == 0) throw std::invalid_argument("loss_cls needs at least one view");
  if (teacher.rank() != 2 || student.rank() != 2 || teacher.size(1) != student.size(1))
    throw ShapeError("loss_cls expects [G x K] and [L x K]");
  const T pairs = static_cast<T>(teacher.size(0) * student.size(0));
  const Tensor<T> cross = matmul(teacher.detach(), transpose(student));
  return mul_scalar(sum(cross), T(-1) / pairs);
}

template <typename T>
PatchLoss<T> loss_patch_mim(const std::vector<Tensor<T>>& teacher, const std::vector<Tensor<T>>& student,
                            const std::vector<std::vector<std::uint8_t>>& masks) {
  if (teacher.size() != student.size() || teacher.size() != masks.size())
    throw std::invalid_argument("loss_patch_mim: view lists differ in length");
  PatchLoss<T> out;
  Tensor<T> total;
  for (std::size_t v = 0; v < teacher.size(); ++v) {
    if (teacher[v].shape() != student[v].shape() || teacher[v].size(0) != masks[v].size())
      throw ShapeError("loss_patch_mim: view " + std::to_string(v) + " misaligned");
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < masks[v].size(); ++i)
      if (masks[v][i]) rows.push_back(i);
    if (rows.empty()) continue;
    out.masked_tokens += rows.size();
    const Tensor<T> term = sum(mul(gather(teacher[v].detach(), rows), gather(student[v], rows)));
    total = total.defined() ? add(total, term) : term;
  }
  if (out.masked_tokens == 0) {
    out.empty = true;
    out.value = Tensor<T>::scalar(T(0));
    return out;
  }
  out.value = mul_scalar(total, T(-1) / static_cast<T>(out.masked_tokens));
  return out;
}

std::vector<std::uint8_t> downsample_mask(std::span<const std::uint8_t> mask, std::size_t grid_h, std::size_t grid_w,
                                          std::size_t levels) {
  if (mask.size() != grid_h * grid_w) throw ShapeError("mask does not match its grid");
  std::vector<std::uint8_t> cur(mask.begin(), mask.end());
  for (std::size_t l = 0; l < levels; ++l) {
    if (grid_h % 2 || grid_w % 2) throw ShapeError("mask grid is not divisible by 2");
    const std::size_t h2 = grid_h / 2, w2 = grid_w / 2;
    std::vector<std::uint8_t> next(h2 * w2);
    for (std::size_t r = 0; r < h2; ++r)
      for (std::size_t c = 0; c < w2; ++c) {
        const std::size_t base = 2 * r * grid_w + 2 * c;
        const int votes = cur[base] + cur[base + 1] + cur[base + grid_w] + cur[base + grid_w + 1];
        next[r * w2 + c] = votes >= 2 ? 1 : 0;
      }
    cur = std::move(next);
    grid_h = h2;
    grid_w = w2;
  }
  return cur;
}

double mean_distribution_entropy(std::span<const double> probs, std::size_t rows) {
  if (rows == 0) return 0;
  const std::size_t k = probs.size() / rows;
  double h = 0;
  for (std::size_t j = 0; j < k; ++j) {
    double m = 0;
    for (std::size_t r = 0; r < rows; ++r) m += probs[r * k + j];
    m /= static_cast<double>(rows);
    if (m > 0) h -= m * std::log(m);
  }
  return h;
}

#define OPENUS_INSTANTIATE(T)                                                                                   \
  template ProjectionHead<T> init_head<T>(std::size_t, const HeadConfig&, std::mt19937_64&, bool);             \
  template Tensor<T> head_logits<T>(const Tensor<T>&, const ProjectionHead<T>&);                               \
  template Tensor<T> teacher_probs<T>(const Tensor<T>&, std::span<const double>, T);                           \
  template Tensor<T> student_log_probs<T>(const Tensor<T>&, T);                                                \
  template Tensor<T> head_forward<T>(const Tensor<T>&, const ProjectionHead<T>&, T, std::span<const double>);  \
  template Backbone<T> clone_backbone<T>(const Backbone<T>&, bool);                                            \
  template TeacherStudentPair<T> make_pair<T>(Backbone<T>, double);                                            \
  template void ema_update<T>(TeacherStudentPair<T>&);                                                         \
  template Tensor<T> loss_cls<T>(const Tensor<T>&, const Tensor<T>&);                                          \
  template PatchLoss<T> loss_patch_mim<T>(const std::vector<Tensor<T>>&, const std::vector<Tensor<T>>&,        \
                                          const std::vector<std::vector<std::uint8_t>>&);

OPENUS_INSTANTIATE(float)
OPENUS_INSTANTIATE(double)
#undef OPENUS_INSTANTIATE

}  // namespace openus
