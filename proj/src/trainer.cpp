// SPDX-License-Identifier: Apache-2.0
#include "openus/trainer.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <numbers>
#include <numeric>
#include <sstream>

namespace openus {

namespace fs = std::filesystem;

// -- optimizer --------------------------------------------------------------

double clip_grad_norm(std::vector<std::vector<double>>& grads, double max_norm) {
  double sq = 0;
  for (const auto& g : grads)
    for (double v : g) sq += v * v;
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const double s = max_norm / (norm + 1e-12);
    for (auto& g : grads)
      for (double& v : g) v *= s;
  }
  return norm;
}

bool adamw_step(std::vector<ParamRef>& params, const std::vector<std::vector<double>>& grads, OptimizerState& state,
                const AdamWHyper& h) {
  if (grads.size() != params.size()) throw std::invalid_argument("adamw: gradient count does not match params");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].size() != params[i].tensor.numel()) throw ShapeError("adamw: gradient shape drift at " + params[i].name);
    for (double g : grads[i])
      if (!std::isfinite(g)) {
        std::cerr << "adamw: non-finite gradient in " << params[i].name << ", step skipped\n";
        return false;
      }
  }
  if (state.m.empty()) {
    for (const ParamRef& p : params) {
      state.m.emplace_back(p.tensor.numel(), 0.0f);
      state.v.emplace_back(p.tensor.numel(), 0.0f);
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adamw: optimizer state does not match params");
  ++state.step;
  const double bc1 = 1 - std::pow(h.beta1, static_cast<double>(state.step));
  const double bc2 = 1 - std::pow(h.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    std::span<float> p = params[i].tensor.mutable_data();
    std::vector<float>& m = state.m[i];
    std::vector<float>& v = state.v[i];
    const double decay = params[i].decays ? 1 - h.lr * h.weight_decay : 1.0;
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double g = grads[i][k];
      const double mk = h.beta1 * m[k] + (1 - h.beta1) * g;
      const double vk = h.beta2 * v[k] + (1 - h.beta2) * g * g;
      m[k] = static_cast<float>(mk);
      v[k] = static_cast<float>(vk);
      const double update = (mk / bc1) / (std::sqrt(vk / bc2) + h.eps);
      p[k] = static_cast<float>(p[k] * decay - h.lr * update);
    }
  }
  return true;
}

double lr_schedule(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double base_lr) {
  if (warmup_steps >= total_steps) throw std::invalid_argument("lr_schedule: warmup must be shorter than training");
  if (step < warmup_steps) return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  if (step >= total_steps) return 0.0;
  const double progress = static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
  return base_lr * 0.5 * (1 + std::cos(std::numbers::pi * progress));
}

double total_loss(const LossComponents& c, const LossToggles& on, const LossWeights& w) {
  double t = 0;
  if (on.cls) t += w.cls * c.cls;
  if (on.patch) t += w.patch * c.patch;
  if (on.recon_global) t += w.recon_global * c.recon_global;
  if (on.recon_local) t += w.recon_local * c.recon_local;
  return t;
}

// -- state ----------------------------------------------------------------

std::vector<ParamRef> student_params(StudentModel& model) {
  std::vector<ParamRef> out;
  auto push = [&](const std::string& name, Tensor<float>& t, bool decays) { out.push_back({name, t, decays}); };
  for_each_param(model.backbone, "student.", push);
  for_each_param(model.recon, "student.", push);
  return out;
}

std::vector<ParamRef> teacher_params(Backbone<float>& teacher) {
  std::vector<ParamRef> out;
  for_each_param(teacher, "teacher.",
                 [&](const std::string& name, Tensor<float>& t, bool decays) { out.push_back({name, t, decays}); });
  return out;
}

TrainState init_train_state(const TrainConfig& config) {
  config.validate();
  TrainState s;
  s.config = config;
  s.rec_ema = RecLossEMA(config.rec_ema_decay);
  std::mt19937_64 rng(config.seed);
  const std::size_t d_last = config.encoder.stage_dims.back();
  s.student.backbone.encoder = init_encoder<float>(config.encoder, rng, true);
  s.student.backbone.head = init_head<float>(d_last, config.head, rng, true);
  s.student.recon = init_recon_head<float>(d_last, config.encoder.total_downsample(), rng, true);
  s.teacher = clone_backbone(s.student.backbone, false);
  s.center_cls.decay = s.center_patch.decay = config.center_decay;
  s.center_cls.center.assign(config.head.prototypes, 0.0);
  s.center_patch.center.assign(config.head.prototypes, 0.0);
  return s;
}

// -- metrics --------------------------------------------------------------

std::string metrics_header() {
  return "epoch,step,loss_total,loss_cls,loss_patch,loss_recon_g,loss_recon_l,alpha,r_t,lr,teacher_entropy";
}

std::string format_metrics_row(const MetricsRow& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%zu,%zu,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g", r.epoch, r.step,
                r.loss_total, r.loss_cls, r.loss_patch, r.loss_recon_g, r.loss_recon_l, r.alpha, r.r_t, r.lr,
                r.teacher_entropy);
  return buf;
}

// -- per-image step -------------------------------------------------------

std::vector<std::size_t> view_to_image_cells(const ViewRecord& rec, std::size_t view_size, std::size_t image_size,
                                             std::size_t p) {
  const std::size_t vg = view_size / p, ig = image_size / p;
  const double s = static_cast<double>(view_size);
  std::vector<std::size_t> cells(vg * vg);
  for (std::size_t r = 0; r < vg; ++r)
    for (std::size_t c = 0; c < vg; ++c) {
      const double vy = static_cast<double>(r * p) + (static_cast<double>(p) - 1) / 2;
      double vx = static_cast<double>(c * p) + (static_cast<double>(p) - 1) / 2;
      if (rec.augment.flip) vx = s - 1 - vx;
      const double iy = rec.crop.y0 + (vy + 0.5) * rec.crop.h / s - 0.5;
      const double ix = rec.crop.x0 + (vx + 0.5) * rec.crop.w / s - 0.5;
      auto cell = [&](double v) {
        return static_cast<std::size_t>(
            std::clamp(std::floor((v + 0.5) / static_cast<double>(p)), 0.0, static_cast<double>(ig - 1)));
      };
      cells[r * vg + c] = cell(iy) * ig + cell(ix);
    }
  return cells;
}

namespace {

struct EpochContext {
  const TrainConfig* config = nullptr;
  std::size_t epoch = 0;
  double alpha = 0, r_t = 0;
  const RecLossEMA* snapshot = nullptr;
  std::vector<double> center_cls, center_patch;
};

struct ImageResult {
  LossComponents losses;
  double total = 0;
  std::vector<std::vector<double>> grads;
  std::vector<double> teacher_cls_logits;  // [G x K]
  std::vector<double> teacher_cls_probs;   // [G x K]
  std::vector<double> teacher_patch_sum;   // [K]
  std::size_t teacher_patch_rows = 0;
  std::vector<double> rec_loss;
  std::vector<std::uint8_t> rec_present;
};

Tensor<float> to_tensor(const GrayImage& img) {
  return Tensor<float>({img.height, img.width}, std::vector<float>(img.pixels.begin(), img.pixels.end()));
}

StudentModel alias_model(const StudentModel& m) {
  StudentModel a = m;
  auto swap = [](const std::string&, Tensor<float>& t, bool) { t = t.alias_leaf(); };
  for_each_param(a.backbone, "", swap);
  for_each_param(a.recon, "", swap);
  return a;
}

MaskPlan global_mask(const EpochContext& ctx, const ImageRecord& record, const ViewRecord& view,
                     const EncoderOutput<float>& teacher_out, std::mt19937_64& rng) {
  const TrainConfig& c = *ctx.config;
  const std::size_t p = c.encoder.stem_patch;
  const std::size_t g = c.views.global_size / p;
  switch (c.global_mask) {
    case GlobalMaskStrategy::none: return empty_mask(g, g);
    case GlobalMaskStrategy::rbw: return random_blockwise_mask(g, g, c.rat_m, rng);
    default: break;
  }
  const AttentionMap am = extract_attention_map(teacher_out);
  const std::vector<double> filled = ctx.snapshot->filled(record.id);
  std::vector<double> rec(am.scores.size(), 0.0);
  double alpha = 0;
  if (!filled.empty()) {
    const std::vector<std::size_t> cells = view_to_image_cells(view, c.views.global_size, c.encoder.image_size, p);
    for (std::size_t t = 0; t < rec.size(); ++t) rec[t] = filled[cells[t]];
    if (c.global_mask == GlobalMaskStrategy::self_adaptive) alpha = ctx.alpha;
    if (c.global_mask == GlobalMaskStrategy::reconstruction) alpha = 1.0;
  }
  const ALPMap alp = compute_alp(am.scores, rec, alpha);
  return self_adaptive_mask(alp, g, g, c.rat_m, c.rat_m * ctx.r_t, rng);
}

ImageResult process_image(const EpochContext& ctx, const StudentModel& student, const Backbone<float>& teacher,
                          const ImageRecord& record, std::size_t index) {
  const TrainConfig& c = *ctx.config;
  std::mt19937_64 rng = image_rng(c.seed, c.reseed_each_epoch ? ctx.epoch : 0, index);
  const ViewBatch views = make_views(record.image, c.views, rng);
  const std::size_t G = views.global_views.size(), L = views.local_views.size();
  const std::size_t K = c.head.prototypes;
  const std::size_t p = c.encoder.stem_patch;
  const std::size_t levels = c.encoder.stages - 1;
  const auto tau_t = static_cast<float>(c.tau_t), tau_s = static_cast<float>(c.tau_s);
  const std::span<const double> ccls = c.centering ? std::span<const double>(ctx.center_cls) : std::span<const double>();
  const std::span<const double> cpatch =
      c.centering ? std::span<const double>(ctx.center_patch) : std::span<const double>();
  ImageResult res;
  res.teacher_patch_sum.assign(K, 0.0);

  // Teacher on clean global views; it never records on a tape.
  std::vector<Tensor<float>> g_images, t_cls, t_patch;
  std::vector<MaskPlan> g_masks;
  for (std::size_t g = 0; g < G; ++g) {
    g_images.push_back(to_tensor(views.global_views[g]));
    const bool need_am =
        c.global_mask != GlobalMaskStrategy::rbw && c.global_mask != GlobalMaskStrategy::none;
    const EncoderOutput<float> out = encode(g_images[g], c.encoder, teacher.encoder, {}, need_am);
    const Tensor<float> cls_logits = head_logits(out.cls_token, teacher.head);
    const Tensor<float> cls_probs = teacher_probs(cls_logits, ccls, tau_t);
    res.teacher_cls_logits.insert(res.teacher_cls_logits.end(), cls_logits.data().begin(), cls_logits.data().end());
    res.teacher_cls_probs.insert(res.teacher_cls_probs.end(), cls_probs.data().begin(), cls_probs.data().end());
    t_cls.push_back(cls_probs);
    if (c.toggles.patch) {
      const Tensor<float> patch_logits = head_logits(out.patch_tokens, teacher.head);
      const std::size_t rows = patch_logits.size(0);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t k = 0; k < K; ++k) res.teacher_patch_sum[k] += patch_logits.data()[r * K + k];
      res.teacher_patch_rows += rows;
      t_patch.push_back(teacher_probs(patch_logits, cpatch, tau_t));
    }
    g_masks.push_back(global_mask(ctx, record, views.global_records[g], out, rng));
  }
  std::vector<MaskPlan> l_masks;
  for (std::size_t l = 0; l < L; ++l) {
    const std::size_t lg = c.views.local_size / p;
    l_masks.push_back(c.local_mask == LocalMaskStrategy::rbw ? random_blockwise_mask(lg, lg, c.local_mask_ratio, rng)
                                                             : empty_mask(lg, lg));
  }

  StudentModel model = alias_model(student);
  Tape<float> tape;
  {
    typename Tape<float>::Scope scope(tape);
    std::vector<Tensor<float>> s_cls_g, s_patch, g_preds, g_targets, l_preds, l_targets, s_cls_l;
    std::vector<std::vector<std::uint8_t>> patch_masks, g_stem_masks, l_stem_masks;
    for (std::size_t g = 0; g < G; ++g) {
      const EncoderOutput<float> out = encode(g_images[g], c.encoder, model.backbone.encoder, g_masks[g].grid);
      if (c.toggles.cls && c.student_global_cls)
        s_cls_g.push_back(student_log_probs(head_logits(out.cls_token, model.backbone.head), tau_s));
      if (c.toggles.patch) {
        s_patch.push_back(student_log_probs(head_logits(out.patch_tokens, model.backbone.head), tau_s));
        patch_masks.push_back(downsample_mask(g_masks[g].grid, out.stem_h, out.stem_w, levels));
      }
      g_preds.push_back(reconstruct(out.patch_tokens, model.recon, out.grid_h, out.grid_w));
      g_targets.push_back(g_images[g]);
      g_stem_masks.push_back(g_masks[g].grid);
    }
    if (c.toggles.cls || c.toggles.recon_local) {
      for (std::size_t l = 0; l < L; ++l) {
        const Tensor<float> img = to_tensor(views.local_views[l]);
        const EncoderOutput<float> out = encode(img, c.encoder, model.backbone.encoder, l_masks[l].grid);
        if (c.toggles.cls) s_cls_l.push_back(student_log_probs(head_logits(out.cls_token, model.backbone.head), tau_s));
        if (c.toggles.recon_local) {
          l_preds.push_back(reconstruct(out.patch_tokens, model.recon, out.grid_h, out.grid_w));
          l_targets.push_back(img);
          l_stem_masks.push_back(l_masks[l].grid);
        }
      }
    }

    Tensor<float> total;
    auto accumulate = [&](const Tensor<float>& term, double weight) {
      const Tensor<float> w = mul_scalar(term, static_cast<float>(weight));
      total = total.defined() ? add(total, w) : w;
    };
    if (c.toggles.cls) {
      const Tensor<float> teacher_rows = concat(t_cls, 0);
      Tensor<float> cls_sum;
      std::size_t pairs = 0;
      if (!s_cls_l.empty()) {
        const Tensor<float> l = loss_cls(teacher_rows, concat(s_cls_l, 0));
        pairs = G * L;
        cls_sum = mul_scalar(l, static_cast<float>(pairs));
      }
      for (std::size_t g = 0; g < s_cls_g.size(); ++g)
        for (std::size_t h = 0; h < G; ++h) {
          if (h == g) continue;
          const Tensor<float> term = neg(sum(mul(t_cls[h].detach(), s_cls_g[g])));
          cls_sum = cls_sum.defined() ? add(cls_sum, term) : term;
          ++pairs;
        }
      const Tensor<float> cls = mul_scalar(cls_sum, 1.0f / static_cast<float>(pairs));
      res.losses.cls = cls.item();
      accumulate(cls, c.weights.cls);
    }
    if (c.toggles.patch) {
      const PatchLoss<float> pl = loss_patch_mim(t_patch, s_patch, patch_masks);
      res.losses.patch = pl.value.item();
      if (!pl.empty) accumulate(pl.value, c.weights.patch);
    }
    if (c.toggles.recon_global) {
      const ReconLoss<float> rl = loss_recon_global(g_preds, g_targets, g_stem_masks, p);
      res.losses.recon_global = rl.value.item();
      if (!rl.empty) accumulate(rl.value, c.weights.recon_global);
    }
    if (c.toggles.recon_local) {
      const ReconLoss<float> rl = loss_recon_local(l_preds, l_targets, l_stem_masks, p);
      res.losses.recon_local = rl.value.item();
      if (!rl.empty) accumulate(rl.value, c.weights.recon_local);
    }
    res.total = total_loss(res.losses, c.toggles, c.weights);
    if (total.defined() && total.requires_grad() && std::isfinite(res.total)) tape.backward(total);

    // Per-patch loss on the image grid from the global views.
    const std::size_t ig = c.encoder.image_size / p;
    std::vector<double> acc(ig * ig, 0.0), cnt(ig * ig, 0.0);
    for (std::size_t g = 0; g < G; ++g) {
      const RecLossMap m = rec_loss_map(g_preds[g], g_targets[g], g_stem_masks[g], p);
      const std::vector<std::size_t> cells =
          view_to_image_cells(views.global_records[g], c.views.global_size, c.encoder.image_size, p);
      for (std::size_t t = 0; t < m.present.size(); ++t)
        if (m.present[t]) acc[cells[t]] += m.per_patch_l2[t], cnt[cells[t]] += 1;
    }
    res.rec_loss.assign(ig * ig, 0.0);
    res.rec_present.assign(ig * ig, 0);
    for (std::size_t i = 0; i < acc.size(); ++i)
      if (cnt[i] > 0) res.rec_loss[i] = acc[i] / cnt[i], res.rec_present[i] = 1;
  }

  for (const ParamRef& pr : student_params(model)) {
    std::vector<double> g(pr.tensor.numel(), 0.0);
    if (pr.tensor.has_grad()) std::copy(pr.tensor.grad().begin(), pr.tensor.grad().end(), g.begin());
    res.grads.push_back(std::move(g));
  }
  return res;
}

std::string describe_batch(const std::vector<const ImageRecord*>& records, const std::vector<ImageResult>& results) {
  std::ostringstream ss;
  ss << "id,loss_total,loss_cls,loss_patch,loss_recon_g,loss_recon_l\n";
  for (std::size_t i = 0; i < records.size(); ++i) {
    const LossComponents& l = results[i].losses;
    ss << records[i]->id << "," << results[i].total << "," << l.cls << "," << l.patch << "," << l.recon_global << ","
       << l.recon_local << "\n";
  }
  return ss.str();
}

}  // namespace

Trainer::Trainer(TrainState state, std::vector<ImageRecord> corpus) : state_(std::move(state)), corpus_(std::move(corpus)) {
  if (corpus_.empty()) throw std::invalid_argument("trainer needs a non-empty corpus");
  const std::size_t s = state_.config.encoder.image_size;
  for (ImageRecord& r : corpus_)
    if (r.image.height != s || r.image.width != s) r.image = resize_bilinear(r.image, s, s);
}

std::size_t Trainer::steps_per_epoch() const {
  return (corpus_.size() + state_.config.batch_size - 1) / state_.config.batch_size;
}

std::vector<MetricsRow> Trainer::run_epoch() {
  const TrainConfig& c = state_.config;
  if (done()) return {};
  const std::size_t e = state_.epoch;
  const std::size_t n = corpus_.size();
  const std::size_t spe = steps_per_epoch();

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 shuffle_rng = image_rng(c.seed, c.reseed_each_epoch ? e : 0, ~std::uint64_t{0});
  std::shuffle(order.begin(), order.end(), shuffle_rng);

  const MaskScheduleState sched{std::min(e, std::max<std::size_t>(1, c.epochs - 1)),
                                std::max<std::size_t>(1, c.epochs - 1), c.r0, c.rT, c.alpha_min, c.alpha_max};
  const RecLossEMA snapshot = state_.rec_ema;
  EpochContext ctx;
  ctx.config = &c;
  ctx.epoch = e;
  ctx.alpha = alpha_schedule(sched);
  ctx.r_t = ratio_schedule(sched);
  ctx.snapshot = &snapshot;

  std::vector<MetricsRow> rows;
  for (std::size_t b = 0; b < spe; ++b) {
    const std::size_t begin = b * c.batch_size, end = std::min(n, begin + c.batch_size);
    const std::size_t B = end - begin;
    ctx.center_cls = state_.center_cls.center;
    ctx.center_patch = state_.center_patch.center;
    const double lr = lr_schedule(state_.step, c.epochs * spe, c.warmup_epochs * spe, c.base_lr);

    std::vector<ImageResult> results(B);
    std::vector<const ImageRecord*> records(B);
    std::vector<std::exception_ptr> errors(B);
    for (std::size_t i = 0; i < B; ++i) records[i] = &corpus_[order[begin + i]];
#pragma omp parallel for schedule(static)
    for (std::size_t i = 0; i < B; ++i) {
      try {
        results[i] = process_image(ctx, state_.student, state_.teacher, *records[i], order[begin + i]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
    for (auto& err : errors)
      if (err) std::rethrow_exception(err);
    for (const ImageResult& r : results)
      if (!std::isfinite(r.total))
        throw TrainingAborted("non-finite loss at epoch " + std::to_string(e + 1) + " step " +
                                  std::to_string(state_.step + 1),
                              describe_batch(records, results));

    std::vector<ParamRef> params = student_params(state_.student);
    std::vector<std::vector<double>> grads(params.size());
    for (std::size_t k = 0; k < params.size(); ++k) grads[k].assign(params[k].tensor.numel(), 0.0);
    const double inv = 1.0 / static_cast<double>(B);
    for (const ImageResult& r : results)
      for (std::size_t k = 0; k < params.size(); ++k)
        for (std::size_t j = 0; j < grads[k].size(); ++j) grads[k][j] += r.grads[k][j] * inv;
    clip_grad_norm(grads, c.clip_norm);
    adamw_step(params, grads, state_.optimizer, {lr, c.weight_decay, c.beta1, c.beta2, c.adam_eps});

    TeacherStudentPair<float> pair{state_.student.backbone, state_.teacher, c.lambda};
    ema_update(pair);

    for (std::size_t i = 0; i < B; ++i)
      update_rec_loss_ema(state_.rec_ema, records[i]->id, results[i].rec_loss, results[i].rec_present);

    std::vector<double> cls_logits, cls_probs, patch_mean(c.head.prototypes, 0.0);
    std::size_t patch_rows = 0;
    for (const ImageResult& r : results) {
      cls_logits.insert(cls_logits.end(), r.teacher_cls_logits.begin(), r.teacher_cls_logits.end());
      cls_probs.insert(cls_probs.end(), r.teacher_cls_probs.begin(), r.teacher_cls_probs.end());
      for (std::size_t k = 0; k < patch_mean.size(); ++k) patch_mean[k] += r.teacher_patch_sum[k];
      patch_rows += r.teacher_patch_rows;
    }
    const std::size_t cls_rows = cls_logits.size() / c.head.prototypes;
    if (c.centering && !c.freeze_center) {
      center_update(state_.center_cls, cls_logits, cls_rows);
      if (patch_rows > 0) {
        for (double& v : patch_mean) v /= static_cast<double>(patch_rows);
        center_update(state_.center_patch, patch_mean, 1);
      }
    }

    ++state_.step;
    MetricsRow row;
    row.epoch = e + 1;
    row.step = state_.step;
    for (const ImageResult& r : results) {
      row.loss_total += r.total * inv;
      row.loss_cls += r.losses.cls * inv;
      row.loss_patch += r.losses.patch * inv;
      row.loss_recon_g += r.losses.recon_global * inv;
      row.loss_recon_l += r.losses.recon_local * inv;
    }
    if (!c.toggles.cls) row.loss_cls = 0;
    if (!c.toggles.patch) row.loss_patch = 0;
    if (!c.toggles.recon_global) row.loss_recon_g = 0;
    if (!c.toggles.recon_local) row.loss_recon_l = 0;
    row.alpha = ctx.alpha;
    row.r_t = ctx.r_t;
    row.lr = lr;
    row.teacher_entropy = mean_distribution_entropy(cls_probs, cls_rows);
    rows.push_back(row);
  }
  ++state_.epoch;
  return rows;
}

// -- driver ---------------------------------------------------------------

namespace {
void write_atomic(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << text;
    if (!out) throw std::runtime_error("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Keeps the header and rows whose epoch is <= last_epoch.
std::string truncate_metrics(const std::string& csv, std::size_t last_epoch) {
  std::istringstream in(csv);
  std::string line, out;
  bool header = true;
  while (std::getline(in, line)) {
    if (header) {
      out += line + "\n";
      header = false;
      continue;
    }
    if (line.empty()) continue;
    if (std::stoull(line.substr(0, line.find(','))) <= last_epoch) out += line + "\n";
  }
  return out;
}
}  // namespace

PretrainResult pretrain(const TrainConfig& config, const std::vector<ImageRecord>& corpus,
                        const std::optional<fs::path>& out_dir, const std::optional<fs::path>& resume,
                        const std::function<void(const MetricsRow&)>& on_row) {
  config.validate();
  TrainState state = resume ? checkpoint_load(*resume) : init_train_state(config);
  if (resume && format_config(state.config) != format_config(config))
    throw CheckpointError("checkpoint config differs from the requested config");

  std::string csv = metrics_header() + "\n";
  if (out_dir) {
    fs::create_directories(*out_dir);
    write_atomic(*out_dir / "config.ini", format_config(config));
    if (resume && fs::exists(*out_dir / "metrics.csv"))
      csv = truncate_metrics(read_text(*out_dir / "metrics.csv"), state.epoch);
  }

  Trainer trainer(std::move(state), corpus);
  PretrainResult result;
  while (!trainer.done()) {
    for (const MetricsRow& row : trainer.run_epoch()) {
      csv += format_metrics_row(row) + "\n";
      result.rows.push_back(row);
      if (on_row) on_row(row);
    }
    if (out_dir) {
      write_atomic(*out_dir / "metrics.csv", csv);
      const std::size_t e = trainer.state().epoch;
      if (config.checkpoint_every > 0 && e % config.checkpoint_every == 0) {
        char name[32];
        std::snprintf(name, sizeof name, "ckpt_epoch%03zu.bin", e);
        checkpoint_save(*out_dir / name, trainer.state());
      }
    }
  }
  if (out_dir) checkpoint_save(*out_dir / "final.bin", trainer.state());
  result.state = std::move(trainer.state());
  return result;
}

}  // namespace openus
