// SPDX-License-Identifier: Apache-2.0
//
// Frozen-encoder linear probe and the masking/component ablation grid.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "openus/trainer.hpp"

namespace openus {

struct ProbeConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 16;
  double lr = 1e-3;
  double momentum = 0.9;
  double train_fraction = 0.7;
  bool shuffle_labels = false;  // null-hypothesis run
};

struct ProbeSeedResult {
  std::uint64_t seed = 0;
  double accuracy = 0;
  double f1_binary = 0;  // positive class = lesion present
  double f1_macro = 0;
};

struct ProbeReport {
  std::vector<ProbeSeedResult> seeds;
  double acc_mean = 0, acc_std = 0;
  double f1_mean = 0, f1_std = 0;
  double f1_macro_mean = 0, f1_macro_std = 0;
};

/// Pooled cls features of each image under a frozen encoder; images are
/// resized to config.image_size.
std::vector<std::vector<double>> extract_features(const EncoderParams<float>& encoder, const EncoderConfig& config,
                                                  const std::vector<ImageRecord>& records);

/// Stratified split; throws std::invalid_argument if either side lacks a class.
void stratified_split(const std::vector<int>& labels, double train_fraction, std::mt19937_64& rng,
                      std::vector<std::size_t>& train, std::vector<std::size_t>& test);

double binary_f1(const std::vector<int>& predicted, const std::vector<int>& truth);
double macro_f1(const std::vector<int>& predicted, const std::vector<int>& truth);

/// Trains a 2-way linear head with momentum SGD per seed (split, init and
/// batch order all follow the seed). Features are z-scored with train-split
/// statistics.
ProbeReport linear_probe(const std::vector<std::vector<double>>& features, const std::vector<int>& labels,
                         const std::vector<std::uint64_t>& seeds, const ProbeConfig& config = {});

/// Teacher encoder of `state`; throws if the probe changed any parameter.
ProbeReport linear_probe(const TrainState& state, const std::vector<ImageRecord>& task,
                         const std::vector<std::uint64_t>& seeds, const ProbeConfig& config = {});

/// Task directory: *.pgm plus manifest.txt; label 1 iff lesion_count > 0.
std::vector<ImageRecord> load_probe_task(const std::filesystem::path& dir);

std::string format_probe_report(const ProbeReport& report);

enum class AblationMode { masks, components };

struct AblationSpec {
  TrainConfig base;
  AblationMode mode = AblationMode::masks;
  std::vector<ImageRecord> task;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  ProbeConfig probe;
};

struct AblationRow {
  std::string name;
  std::string views;  // single / multi
  GlobalMaskStrategy global_mask = GlobalMaskStrategy::rbw;
  LocalMaskStrategy local_mask = LocalMaskStrategy::none;
  LossToggles toggles;
  double final_loss = 0;
  std::vector<MetricsRow> metrics;
  ProbeReport probe;
};

/// Configurations of the grid; masks: {rbw, attention, self_adaptive} x
/// {single, multi}; components: the four cumulative loss subsets.
std::vector<AblationRow> ablation_grid(AblationMode mode);

/// Pretrains and probes every row of the grid.
std::vector<AblationRow> run_ablation(const AblationSpec& spec, const std::vector<ImageRecord>& corpus,
                                      const std::function<void(const AblationRow&)>& on_row = {});

std::string ablation_csv(const std::vector<AblationRow>& rows);

/// Grid file: [ablate] mode, config, task, seeds, plus optional overrides in
/// the usual config sections.
AblationSpec load_ablation_spec(const std::filesystem::path& path);

}  // namespace openus
