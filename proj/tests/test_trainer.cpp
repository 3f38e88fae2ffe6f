// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include "openus/trainer.hpp"
#include "support.hpp"

using namespace openus;
namespace fs = std::filesystem;

namespace {
fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("openus_test_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}
}  // namespace

TEST_CASE("config text round trip") {
  TrainConfig c = openus::testing::small_train_config();
  c.global_mask = GlobalMaskStrategy::attention;
  c.toggles.recon_local = false;
  c.encoder.attention_form = AttentionForm::plain;
  c.base_lr = 1.25e-4;
  const TrainConfig back = parse_config(format_config(c));
  CHECK(format_config(back) == format_config(c));
  CHECK(back.global_mask == GlobalMaskStrategy::attention);
  CHECK_FALSE(back.toggles.recon_local);
  CHECK(back.base_lr == 1.25e-4);
  CHECK(back.encoder.stage_dims == std::vector<std::size_t>{8, 16});

  CHECK_THROWS_AS(parse_config("[train]\nbogus = 1\n"), std::invalid_argument);
  CHECK_THROWS_AS(parse_config("epochs = 3\n"), std::invalid_argument);
  CHECK_THROWS_AS(parse_config("[train]\nepochs = -2\n"), std::invalid_argument);
  CHECK_THROWS_AS(parse_config("[masking]\nglobal_mask = magic\n"), std::invalid_argument);
  CHECK_THROWS_AS(parse_config("[train]\nepochs = 2\nwarmup_epochs = 2\n"), std::invalid_argument);
  CHECK(parse_config("# comment\n[train]\nepochs = 7\nwarmup_epochs = 1\n").epochs == 7);

  TrainConfig bad = c;
  bad.views.global_size = 48;
  CHECK_THROWS(bad.validate());
  bad = c;
  bad.views.local_size = 12;
  CHECK_THROWS(bad.validate());
  bad = c;
  bad.toggles = {false, false, false, false};
  CHECK_THROWS(bad.validate());
}

TEST_CASE("learning-rate schedule") {
  CHECK(lr_schedule(0, 100, 10, 1.0) == 0.0);
  CHECK(lr_schedule(5, 100, 10, 1.0) == doctest::Approx(0.5));
  CHECK(lr_schedule(10, 100, 10, 1.0) == doctest::Approx(1.0));
  CHECK(lr_schedule(55, 100, 10, 1.0) == doctest::Approx(0.5));
  CHECK(lr_schedule(100, 100, 10, 1.0) == 0.0);
  CHECK(lr_schedule(40, 100, 10, 2.0) == doctest::Approx(1.0 + std::cos(std::numbers::pi / 3)));
  CHECK_THROWS(lr_schedule(0, 10, 10, 1.0));
}

TEST_CASE("AdamW step and clipping") {
  ParamRef p{"w", Tensor<float>({2}, {1.0f, -2.0f}), true};
  ParamRef q{"b", Tensor<float>({1}, {0.5f}), false};
  std::vector<ParamRef> params{p, q};
  OptimizerState st;
  const AdamWHyper h{0.1, 0.5, 0.9, 0.999, 1e-8};
  REQUIRE(adamw_step(params, {{0.2, -0.4}, {1.0}}, st, h));
  // first step: bias-corrected update is g / |g| (up to eps)
  CHECK(p.tensor[0] == doctest::Approx(1.0 * (1 - 0.05) - 0.1).epsilon(1e-6));
  CHECK(p.tensor[1] == doctest::Approx(-2.0 * (1 - 0.05) + 0.1).epsilon(1e-6));
  CHECK(q.tensor[0] == doctest::Approx(0.5 - 0.1).epsilon(1e-6));
  CHECK(st.step == 1);

  // second step, recomputed by hand
  const double g = 0.1;
  const double m = 0.9 * (0.1 * 0.2) + 0.1 * g;
  const double v = 0.999 * (0.001 * 0.04) + 0.001 * g * g;
  const double expect = p.tensor[0] * (1 - 0.05) - 0.1 * (m / (1 - 0.81)) / (std::sqrt(v / (1 - 0.999 * 0.999)) + 1e-8);
  REQUIRE(adamw_step(params, {{g, 0.0}, {0.0}}, st, h));
  CHECK(p.tensor[0] == doctest::Approx(expect).epsilon(1e-6));

  const float before = p.tensor[0];
  CHECK_FALSE(adamw_step(params, {{std::nan(""), 0.0}, {0.0}}, st, h));
  CHECK(p.tensor[0] == before);
  CHECK(st.step == 2);
  CHECK_THROWS(adamw_step(params, {{0.0}}, st, h));

  std::vector<std::vector<double>> grads{{3, 0}, {4}};
  CHECK(clip_grad_norm(grads, 1.0) == doctest::Approx(5.0));
  CHECK(grads[0][0] == doctest::Approx(0.6));
  CHECK(grads[1][0] == doctest::Approx(0.8));
  std::vector<std::vector<double>> small{{0.3}};
  clip_grad_norm(small, 1.0);
  CHECK(small[0][0] == 0.3);
  clip_grad_norm(grads, 0.0);
  CHECK(grads[1][0] == doctest::Approx(0.8));
}

TEST_CASE("total loss sums enabled components") {
  const LossComponents c{1.5, 2.0, 0.25, 0.125};
  CHECK(total_loss(c, {}) == 3.875);
  CHECK(total_loss(c, {true, false, true, false}) == 1.75);
  CHECK(total_loss(c, {true, true, false, false}) == 3.5);
  CHECK(total_loss(c, {false, false, false, true}, {1, 1, 1, 4}) == 0.5);
}

TEST_CASE("view to image cell mapping") {
  ViewRecord identity;
  identity.crop = {0, 0, 64, 64};
  const auto cells = view_to_image_cells(identity, 64, 64, 4);
  REQUIRE(cells.size() == 256);
  for (std::size_t i = 0; i < 256; ++i) CHECK(cells[i] == i);
  ViewRecord flipped = identity;
  flipped.augment.flip = true;
  CHECK(view_to_image_cells(flipped, 64, 64, 4)[0] == 15);
  ViewRecord corner;
  corner.crop = {32, 32, 32, 32};
  CHECK(view_to_image_cells(corner, 32, 64, 4)[0] == 8 * 16 + 8);
}

TEST_CASE("checkpoint round trip and corruption") {
  const TrainConfig c = openus::testing::small_train_config();
  TrainState s = init_train_state(c);
  s.epoch = 2;
  s.step = 4;
  s.center_cls.center.assign(32, 0.25);
  s.rec_ema.update("img", std::vector<double>{1, 2}, std::vector<std::uint8_t>{1, 0});
  const fs::path dir = scratch("ckpt");
  fs::create_directories(dir);
  checkpoint_save(dir / "a.bin", s);
  const TrainState back = checkpoint_load(dir / "a.bin");
  CHECK(back.epoch == 2);
  CHECK(back.step == 4);
  CHECK(back.center_cls.center == s.center_cls.center);
  CHECK(format_config(back.config) == format_config(c));
  REQUIRE(back.rec_ema.find("img"));
  CHECK(back.rec_ema.find("img")->observed == std::vector<std::uint8_t>{1, 0});
  checkpoint_save(dir / "b.bin", back);
  CHECK(slurp(dir / "a.bin") == slurp(dir / "b.bin"));

  std::string bytes = slurp(dir / "a.bin");
  bytes[bytes.size() / 2] ^= 0x40;
  std::ofstream(dir / "bad.bin", std::ios::binary) << bytes;
  CHECK_THROWS_AS(checkpoint_load(dir / "bad.bin"), CheckpointError);
  std::ofstream(dir / "short.bin", std::ios::binary) << bytes.substr(0, 100);
  CHECK_THROWS_AS(checkpoint_load(dir / "short.bin"), CheckpointError);
  std::ofstream(dir / "junk.bin", std::ios::binary) << "hello";
  CHECK_THROWS_AS(checkpoint_load(dir / "junk.bin"), CheckpointError);
  CHECK_THROWS_AS(checkpoint_load(dir / "missing.bin"), CheckpointError);
  fs::remove_all(dir);
}

TEST_CASE("short runs are deterministic and resumable") {
  const TrainConfig c = openus::testing::small_train_config();
  const auto corpus = load_training_corpus(c);
  const fs::path a = scratch("run_a"), b = scratch("run_b");
  const PretrainResult ra = pretrain(c, corpus, a);
  pretrain(c, corpus, b);
  CHECK(slurp(a / "metrics.csv") == slurp(b / "metrics.csv"));
  CHECK(slurp(a / "final.bin") == slurp(b / "final.bin"));
  REQUIRE(ra.rows.size() == 6);
  for (const MetricsRow& r : ra.rows) {
    CHECK(std::isfinite(r.loss_total));
    CHECK(r.loss_total == doctest::Approx(r.loss_cls + r.loss_patch + r.loss_recon_g + r.loss_recon_l).epsilon(1e-9));
    CHECK(r.teacher_entropy > 0);
  }
  CHECK(ra.rows.front().lr == 0.0);

  // resume from epoch 1 into a copy of run b's directory
  const fs::path r = scratch("run_r");
  fs::create_directories(r);
  fs::copy_file(b / "metrics.csv", r / "metrics.csv");
  pretrain(c, corpus, r, b / "ckpt_epoch001.bin");
  CHECK(slurp(r / "metrics.csv") == slurp(a / "metrics.csv"));
  CHECK(slurp(r / "final.bin") == slurp(a / "final.bin"));

  TrainConfig other = c;
  other.base_lr = 1e-3;
  CHECK_THROWS_AS(pretrain(other, corpus, std::nullopt, b / "ckpt_epoch001.bin"), CheckpointError);
  for (const auto& d : {a, b, r}) fs::remove_all(d);
}

TEST_CASE("frozen system logs constant losses") {
  TrainConfig c = openus::testing::small_train_config();
  c.lambda = 1.0;
  c.base_lr = 0.0;
  c.global_mask = GlobalMaskStrategy::rbw;
  c.freeze_center = true;
  c.reseed_each_epoch = false;
  const auto rows = pretrain(c, load_training_corpus(c), std::nullopt).rows;
  const std::size_t per_epoch = rows.size() / c.epochs;
  REQUIRE(per_epoch * c.epochs == rows.size());
  for (std::size_t i = per_epoch; i < rows.size(); ++i) {
    const MetricsRow& a = rows[i % per_epoch];
    CHECK(rows[i].loss_total == a.loss_total);
    CHECK(rows[i].loss_cls == a.loss_cls);
    CHECK(rows[i].loss_patch == a.loss_patch);
    CHECK(rows[i].loss_recon_g == a.loss_recon_g);
    CHECK(rows[i].loss_recon_l == a.loss_recon_l);
  }
}

TEST_CASE("metrics row format") {
  MetricsRow row;
  row.epoch = 1;
  row.step = 2;
  row.loss_total = 0.5;
  const std::string line = format_metrics_row(row);
  CHECK(line.rfind("1,2,", 0) == 0);
  std::size_t commas = 0;
  for (char ch : metrics_header()) commas += ch == ',';
  CHECK(static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) == commas);
}
