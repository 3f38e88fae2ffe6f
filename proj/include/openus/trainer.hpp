// SPDX-License-Identifier: Apache-2.0
//
// Pre-training loop: config, AdamW, schedules, per-image loss assembly,
// EMA teacher, checkpoints and metrics.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "openus/data.hpp"
#include "openus/distillation.hpp"
#include "openus/encoder.hpp"
#include "openus/masking.hpp"
#include "openus/reconstruction.hpp"

namespace openus {

enum class GlobalMaskStrategy { self_adaptive, attention, reconstruction, rbw, none };
enum class LocalMaskStrategy { rbw, none };

std::string to_string(GlobalMaskStrategy s);
std::string to_string(LocalMaskStrategy s);
GlobalMaskStrategy parse_global_mask(const std::string& s);
LocalMaskStrategy parse_local_mask(const std::string& s);

struct LossToggles {
  bool cls = true;
  bool patch = true;
  bool recon_global = true;
  bool recon_local = true;
};

struct LossWeights {
  double cls = 1, patch = 1, recon_global = 1, recon_local = 1;
};

struct TrainConfig {
  // [train]
  std::size_t epochs = 20;
  std::size_t warmup_epochs = 3;
  std::size_t batch_size = 16;
  double base_lr = 5e-4;
  double weight_decay = 4e-2;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  double clip_norm = 3.0;  // <= 0 disables clipping
  double tau_t = 0.04, tau_s = 0.07;
  double lambda = 0.996;
  double center_decay = 0.9;
  bool centering = true;
  bool freeze_center = false;
  bool student_global_cls = false;  // adds teacher-global x other-student-global pairs
  bool reseed_each_epoch = true;    // false: every epoch sees the same views
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 1;  // epochs; 0 disables intermediate checkpoints
  // [masking]
  double rat_m = 0.8;
  double r0 = 0.1, rT = 0.9;
  double alpha_min = 0.1, alpha_max = 0.9;
  double local_mask_ratio = 0.5;
  double rec_ema_decay = 0.9;
  GlobalMaskStrategy global_mask = GlobalMaskStrategy::self_adaptive;
  LocalMaskStrategy local_mask = LocalMaskStrategy::rbw;
  // [loss]
  LossToggles toggles;
  LossWeights weights;
  // [encoder], [head], [views], [augment]
  EncoderConfig encoder;
  HeadConfig head;
  ViewConfig views;
  // [data]
  std::string corpus_dir;  // empty: synthetic phantoms
  std::size_t synth_count = 64;
  SpecklePhantomSpec synth;

  void validate() const;
};

/// Flat "section.key" -> text view of every field, in a fixed order.
std::vector<std::pair<std::string, std::string>> config_items(const TrainConfig& config);
/// Sets one field from text; throws std::invalid_argument on unknown keys or bad values.
void set_config_item(TrainConfig& config, const std::string& key, const std::string& value);

/// INI file with [section] headers; unknown keys are errors.
TrainConfig load_config(const std::filesystem::path& path);
TrainConfig parse_config(const std::string& text);
std::string format_config(const TrainConfig& config);

/// Training corpus per the [data] section, resized to the encoder image size.
std::vector<ImageRecord> load_training_corpus(const TrainConfig& config);

// -- optimizer --------------------------------------------------------------

struct ParamRef {
  std::string name;
  Tensor<float> tensor;
  bool decays = true;
};

struct OptimizerState {
  std::vector<std::vector<float>> m, v;
  std::uint64_t step = 0;
};

struct AdamWHyper {
  double lr = 5e-4, weight_decay = 4e-2, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

/// p <- p (1 - lr wd) (decaying params only), then the bias-corrected Adam
/// update. Returns false, leaving everything untouched, on a non-finite gradient.
bool adamw_step(std::vector<ParamRef>& params, const std::vector<std::vector<double>>& grads, OptimizerState& state,
                const AdamWHyper& hyper);

/// Scales grads in place so their global l2 norm is at most max_norm; returns
/// the norm before clipping.
double clip_grad_norm(std::vector<std::vector<double>>& grads, double max_norm);

/// Linear warmup from 0, then cosine to 0 at total_steps.
double lr_schedule(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double base_lr);

struct LossComponents {
  double cls = 0, patch = 0, recon_global = 0, recon_local = 0;
};

/// Weighted sum of the enabled components.
double total_loss(const LossComponents& c, const LossToggles& on, const LossWeights& w = {});

// -- state ----------------------------------------------------------------

struct StudentModel {
  Backbone<float> backbone;
  ReconHead<float> recon;
};

struct TrainState {
  TrainConfig config;
  StudentModel student;
  Backbone<float> teacher;
  OptimizerState optimizer;
  std::size_t epoch = 0;  // completed epochs
  std::size_t step = 0;   // completed optimizer steps
  CenterState center_cls, center_patch;
  RecLossEMA rec_ema;
};

TrainState init_train_state(const TrainConfig& config);

/// Student parameters in optimizer order, names prefixed "student.".
std::vector<ParamRef> student_params(StudentModel& model);
std::vector<ParamRef> teacher_params(Backbone<float>& teacher);

void checkpoint_save(const std::filesystem::path& path, const TrainState& state);
TrainState checkpoint_load(const std::filesystem::path& path);

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// -- loop -----------------------------------------------------------------

struct MetricsRow {
  std::size_t epoch = 0, step = 0;
  double loss_total = 0, loss_cls = 0, loss_patch = 0, loss_recon_g = 0, loss_recon_l = 0;
  double alpha = 0, r_t = 0, lr = 0, teacher_entropy = 0;
};

std::string metrics_header();
std::string format_metrics_row(const MetricsRow& row);

class TrainingAborted : public std::runtime_error {
 public:
  TrainingAborted(const std::string& what, std::string dump) : std::runtime_error(what), dump_(std::move(dump)) {}
  const std::string& dump() const { return dump_; }

 private:
  std::string dump_;
};

/// Image-grid cell (stem patch of the full image) under each stem patch of a view.
std::vector<std::size_t> view_to_image_cells(const ViewRecord& record, std::size_t view_size, std::size_t image_size,
                                             std::size_t stem_patch);

class Trainer {
 public:
  Trainer(TrainState state, std::vector<ImageRecord> corpus);

  /// Runs one epoch; returns its rows.
  std::vector<MetricsRow> run_epoch();
  bool done() const { return state_.epoch >= state_.config.epochs; }

  TrainState& state() { return state_; }
  const TrainState& state() const { return state_; }
  std::size_t steps_per_epoch() const;

 private:
  TrainState state_;
  std::vector<ImageRecord> corpus_;
};

struct PretrainResult {
  std::vector<MetricsRow> rows;
  TrainState state;
};

/// Full run. With out_dir set, writes metrics.csv and checkpoints there.
/// With resume set, continues from that checkpoint and appends to metrics.csv.
PretrainResult pretrain(const TrainConfig& config, const std::vector<ImageRecord>& corpus,
                        const std::optional<std::filesystem::path>& out_dir,
                        const std::optional<std::filesystem::path>& resume = std::nullopt,
                        const std::function<void(const MetricsRow&)>& on_row = {});

}  // namespace openus
