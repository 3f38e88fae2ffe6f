// SPDX-License-Identifier: Apache-2.0
//
// openus: gen-synth | pretrain | probe | inspect-mask | ablate
#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "openus/probe.hpp"
#include "openus/trainer.hpp"

namespace fs = std::filesystem;
using namespace openus;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << text;
  }
  fs::rename(tmp, path);
}

// Builds a directory next to `out` and moves it into place when complete.
template <typename Fn>
void build_dir(const fs::path& out, Fn&& fill) {
  if (fs::exists(out) && !fs::is_empty(out)) throw std::runtime_error(out.string() + " exists and is not empty");
  const fs::path tmp = out.string() + ".partial";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  try {
    fill(tmp);
  } catch (...) {
    fs::remove_all(tmp);
    throw;
  }
  if (fs::exists(out)) fs::remove(out);
  fs::rename(tmp, out);
}

SpecklePhantomSpec read_spec(const std::string& path) {
  TrainConfig c;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open spec " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    c = parse_config(ss.str());
  }
  return c.synth;
}

GrayImage grid_image(const std::vector<double>& values, std::size_t gh, std::size_t gw, std::size_t scale) {
  GrayImage img;
  img.height = gh * scale;
  img.width = gw * scale;
  img.pixels.resize(img.height * img.width);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) img.pixels[y * img.width + x] = values[(y / scale) * gw + x / scale];
  return img;
}

std::string join(const std::vector<double>& v) {
  std::string s;
  char buf[40];
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%s%.17g", i ? " " : "", v[i]);
    s += buf;
  }
  return s;
}

int gen_synth(const std::string& spec_path, const fs::path& out, std::size_t count) {
  const SpecklePhantomSpec spec = read_spec(spec_path);
  build_dir(out, [&](const fs::path& dir) {
    std::string manifest;
    for (const ImageRecord& r : synth_corpus(spec, count)) {
      write_pgm(dir / (r.id + ".pgm"), r.image);
      manifest += manifest_line(r) + "\n";
    }
    write_text(dir / "manifest.txt", manifest);
  });
  std::cout << "wrote " << count << " phantoms to " << out.string() << "\n";
  return 0;
}

int run_pretrain(const fs::path& config_path, const fs::path& out, const std::string& resume) {
  const TrainConfig config = load_config(config_path);
  const std::vector<ImageRecord> corpus = load_training_corpus(config);
  try {
    pretrain(config, corpus, out, resume.empty() ? std::nullopt : std::optional<fs::path>(resume),
             [](const MetricsRow& r) {
               if (r.step % 4 == 0)
                 std::fprintf(stderr, "epoch %zu step %zu loss %.4f entropy %.3f\n", r.epoch, r.step, r.loss_total,
                              r.teacher_entropy);
             });
  } catch (const TrainingAborted& e) {
    write_text(out / "abort_dump.csv", e.dump());
    throw;
  }
  return 0;
}

int run_probe(const fs::path& ckpt, const fs::path& task_dir, std::size_t seeds, bool random_baseline,
              const std::string& out) {
  TrainState state = checkpoint_load(ckpt);
  if (random_baseline) state = init_train_state(state.config);
  const std::vector<ImageRecord> task = load_probe_task(task_dir);
  std::vector<std::uint64_t> seed_list;
  for (std::size_t i = 0; i < seeds; ++i) seed_list.push_back(i);
  const ProbeReport report = linear_probe(state, task, seed_list);
  const std::string text = format_probe_report(report);
  std::printf("%s", text.c_str());
  std::printf("ACC %.4f +- %.4f  F1 %.4f +- %.4f  macro-F1 %.4f +- %.4f\n", report.acc_mean, report.acc_std,
              report.f1_mean, report.f1_std, report.f1_macro_mean, report.f1_macro_std);
  if (!out.empty()) {
    fs::create_directories(out);
    write_text(fs::path(out) / "probe.csv", text);
  }
  return 0;
}

int inspect_mask(const fs::path& ckpt, const fs::path& image_path, std::size_t epoch_sim, const fs::path& out,
                 std::uint64_t seed) {
  const TrainState state = checkpoint_load(ckpt);
  const TrainConfig& c = state.config;
  const std::size_t T = std::max<std::size_t>(1, c.epochs - 1);
  if (epoch_sim > T) throw std::invalid_argument("--epoch-sim must lie in [0, " + std::to_string(T) + "]");
  const GrayImage image = resize_bilinear(read_pgm(image_path), c.encoder.image_size, c.encoder.image_size);
  const std::string id = image_path.stem().string();
  const std::size_t p = c.encoder.stem_patch, g = c.encoder.image_size / p;

  const Tensor<float> t({image.height, image.width}, std::vector<float>(image.pixels.begin(), image.pixels.end()));
  const AttentionMap am = extract_attention_map(encode(t, c.encoder, state.teacher.encoder, {}, true));
  std::vector<double> rec = state.rec_ema.filled(id);
  const bool cold = rec.empty();
  if (cold) rec.assign(g * g, 0.0);
  const MaskScheduleState sched{epoch_sim, T, c.r0, c.rT, c.alpha_min, c.alpha_max};
  const double alpha = cold ? 0.0 : alpha_schedule(sched);
  const double r_t = ratio_schedule(sched);
  const ALPMap alp = compute_alp(am.scores, rec, alpha);
  std::mt19937_64 rng(seed);
  const MaskPlan plan = self_adaptive_mask(alp, g, g, c.rat_m, c.rat_m * r_t, rng);

  build_dir(out, [&](const fs::path& dir) {
    write_pgm(dir / "am.pgm", grid_image(alp.am_norm, g, g, p));
    write_pgm(dir / "recema.pgm", grid_image(alp.rec_norm, g, g, p));
    write_pgm(dir / "alp.pgm", grid_image(alp.scores, g, g, p));
    write_pgm(dir / "mask.pgm", grid_image(std::vector<double>(plan.grid.begin(), plan.grid.end()), g, g, p));
    std::string s;
    char buf[256];
    std::snprintf(buf, sizeof buf,
                  "image %s\ngrid %zu %zu\nepoch_sim %zu of %zu\nalpha %.17g\nr_t %.17g\nrat_m %.17g\nthr_m %.17g\n"
                  "n_patches %zu\nn_masked %zu\nalp_driven %zu\nrandom %zu\nrec_cold_start %d\nam_constant %d\n",
                  id.c_str(), g, g, epoch_sim, T, alpha, r_t, c.rat_m, c.rat_m * r_t, plan.size(), plan.n_masked,
                  plan.alp_driven_idx.size(), plan.random_idx.size(), cold ? 1 : 0, am.constant ? 1 : 0);
    s += buf;
    s += "am " + join(am.scores) + "\n";
    s += "recema " + join(rec) + "\n";
    s += "alp " + join(alp.scores) + "\n";
    std::vector<double> mask(plan.grid.begin(), plan.grid.end());
    s += "mask " + join(mask) + "\n";
    write_text(dir / "summary.txt", s);
  });
  std::cout << "masked " << plan.n_masked << " of " << plan.size() << " patches; wrote " << out.string() << "\n";
  return 0;
}

int ablate(const fs::path& grid, const fs::path& out) {
  const AblationSpec spec = load_ablation_spec(grid);
  const std::vector<ImageRecord> corpus = load_training_corpus(spec.base);
  const std::vector<AblationRow> rows = run_ablation(spec, corpus, [](const AblationRow& r) {
    std::fprintf(stderr, "%s: final loss %.4f, probe ACC %.4f +- %.4f\n", r.name.c_str(), r.final_loss,
                 r.probe.acc_mean, r.probe.acc_std);
  });
  const std::string csv = ablation_csv(rows);
  fs::create_directories(out);
  write_text(out / "ablation.csv", csv);
  std::printf("%s", csv.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"openus: masked self-distillation pre-training for ultrasound-like images"};
  app.require_subcommand(1);

  std::string spec, out, config, resume, ckpt, task, image, grid;
  std::size_t count = 64, seeds = 5, epoch_sim = 0;
  std::uint64_t seed = 0;
  bool random_baseline = false;

  auto* gen = app.add_subcommand("gen-synth", "write a speckle-phantom corpus and manifest");
  gen->add_option("--spec", spec, "INI with a [data] section (defaults when omitted)");
  gen->add_option("--out", out, "output directory")->required();
  gen->add_option("--count", count, "number of images");

  auto* pre = app.add_subcommand("pretrain", "run pre-training");
  pre->add_option("--config", config, "INI config")->required()->check(CLI::ExistingFile);
  pre->add_option("--out", out, "output directory")->required();
  pre->add_option("--resume", resume, "checkpoint to continue from")->check(CLI::ExistingFile);

  auto* probe = app.add_subcommand("probe", "linear probe on frozen teacher features");
  probe->add_option("--ckpt", ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  probe->add_option("--task", task, "task directory (PGMs + manifest.txt)")->required()->check(CLI::ExistingDirectory);
  probe->add_option("--seeds", seeds, "number of seeds");
  probe->add_flag("--random-baseline", random_baseline, "probe a freshly initialized encoder instead");
  probe->add_option("--out", out, "directory for probe.csv");

  auto* inspect = app.add_subcommand("inspect-mask", "dump AM, RecLossEMA, ALP and mask for one image");
  inspect->add_option("--ckpt", ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  inspect->add_option("--image", image, "PGM image")->required()->check(CLI::ExistingFile);
  inspect->add_option("--epoch-sim", epoch_sim, "schedule step t");
  inspect->add_option("--out", out, "output directory")->required();
  inspect->add_option("--seed", seed, "mask RNG seed");

  auto* abl = app.add_subcommand("ablate", "masking or component ablation grid");
  abl->add_option("--grid", grid, "grid INI")->required()->check(CLI::ExistingFile);
  abl->add_option("--out", out, "output directory")->required();

  CLI11_PARSE(app, argc, argv);
  try {
    if (*gen) return gen_synth(spec, out, count);
    if (*pre) return run_pretrain(config, out, resume);
    if (*probe) return run_probe(ckpt, task, seeds, random_baseline, out);
    if (*inspect) return inspect_mask(ckpt, image, epoch_sim, out, seed);
    if (*abl) return ablate(grid, out);
  } catch (const std::exception& e) {
    std::cerr << "openus: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
