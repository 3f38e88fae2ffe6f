// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "openus/probe.hpp"
#include "support.hpp"

using namespace openus;
namespace fs = std::filesystem;

TEST_CASE("F1 examples") {
  const std::vector<int> truth{1, 1, 1, 0, 0, 0, 0, 1};
  const std::vector<int> pred{1, 0, 1, 1, 0, 0, 0, 1};
  // positive: tp 3, fp 1, fn 1 -> 6/8; negative: tp 3, fp 1, fn 1 -> 6/8
  CHECK(binary_f1(pred, truth) == doctest::Approx(0.75));
  CHECK(macro_f1(pred, truth) == doctest::Approx(0.75));
  const std::vector<int> all_neg(8, 0);
  CHECK(binary_f1(all_neg, truth) == 0.0);
  CHECK(macro_f1(all_neg, truth) == doctest::Approx(0.5 * (2.0 * 4 / (8 + 4))));
  CHECK(binary_f1(truth, truth) == 1.0);
}

TEST_CASE("stratified split") {
  std::vector<int> labels(30, 0);
  for (std::size_t i = 0; i < 10; ++i) labels[i * 3] = 1;
  std::mt19937_64 rng(1);
  std::vector<std::size_t> train, test;
  stratified_split(labels, 0.7, rng, train, test);
  CHECK(train.size() + test.size() == 30);
  std::size_t pos_train = 0;
  for (std::size_t i : train) pos_train += labels[i];
  CHECK(pos_train == 7);
  std::set<std::size_t> all(train.begin(), train.end());
  for (std::size_t i : test) CHECK(all.insert(i).second);
  CHECK(std::is_sorted(train.begin(), train.end()));

  std::vector<int> one{1, 0, 0, 0};
  CHECK_THROWS_AS(stratified_split(one, 0.7, rng, train, test), std::invalid_argument);
}

TEST_CASE("linear probe on separable and shuffled features") {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> noise(0, 1);
  std::vector<std::vector<double>> feats;
  std::vector<int> labels;
  for (int i = 0; i < 200; ++i) {
    const int y = i % 3 == 0;
    std::vector<double> f(5);
    for (double& v : f) v = noise(rng);
    f[2] += y ? 4.0 : -4.0;
    feats.push_back(f);
    labels.push_back(y);
  }
  const ProbeReport r = linear_probe(feats, labels, {0, 1, 2});
  CHECK(r.seeds.size() == 3);
  CHECK(r.acc_mean > 0.97);
  CHECK(r.f1_mean > 0.95);
  const ProbeReport again = linear_probe(feats, labels, {0, 1, 2});
  CHECK(again.acc_mean == r.acc_mean);

  // balanced labels, shuffled: chance level
  std::vector<int> balanced(200);
  for (std::size_t i = 0; i < 200; ++i) balanced[i] = i % 2;
  for (std::size_t i = 0; i < 200; ++i) feats[i][2] += balanced[i] ? 4.0 : -4.0;
  ProbeConfig null_cfg;
  null_cfg.shuffle_labels = true;
  const ProbeReport n = linear_probe(feats, balanced, {0, 1, 2, 3, 4}, null_cfg);
  CHECK(std::abs(n.acc_mean - 0.5) <= 0.1);
  CHECK_THROWS(linear_probe(feats, labels, {}));
  CHECK(format_probe_report(r).find("\nmean,") != std::string::npos);
}

TEST_CASE("probe on a trained state leaves it unchanged") {
  TrainConfig c = openus::testing::small_train_config();
  c.epochs = 2;
  const auto corpus = load_training_corpus(c);
  const PretrainResult run = pretrain(c, corpus, std::nullopt);
  SpecklePhantomSpec s = c.synth;
  s.seed = 500;
  const auto task = synth_corpus(s, 40);
  ProbeConfig pc;
  pc.epochs = 5;
  const ProbeReport r = linear_probe(run.state, task, {0, 1}, pc);
  CHECK(r.seeds.size() == 2);
  CHECK(r.acc_mean >= 0);
  CHECK(r.acc_mean <= 1);
  const auto f = extract_features(run.state.teacher.encoder, c.encoder, task);
  REQUIRE(f.size() == 40);
  CHECK(f[0].size() == 16);
}

TEST_CASE("probe task directory and ablation grid") {
  const fs::path dir = fs::temp_directory_path() / "openus_test_task";
  fs::remove_all(dir);
  fs::create_directories(dir);
  SpecklePhantomSpec s;
  s.size = 32;
  const auto recs = synth_corpus(s, 6);
  {
    std::ofstream m(dir / "manifest.txt");
    for (const auto& r : recs) {
      write_pgm(dir / (r.id + ".pgm"), r.image);
      m << manifest_line(r) << "\n";
    }
  }
  const auto task = load_probe_task(dir);
  REQUIRE(task.size() == 6);
  for (std::size_t i = 0; i < 6; ++i) CHECK(task[i].label() == recs[i].label());
  fs::remove_all(dir);

  const auto masks = ablation_grid(AblationMode::masks);
  REQUIRE(masks.size() == 6);
  CHECK(masks[5].name == "self_adaptive/multi");
  CHECK(masks[5].local_mask == LocalMaskStrategy::rbw);
  CHECK(masks[0].local_mask == LocalMaskStrategy::none);
  const auto comps = ablation_grid(AblationMode::components);
  REQUIRE(comps.size() == 4);
  CHECK_FALSE(comps[0].toggles.recon_global);
  CHECK(comps[3].toggles.recon_local);
  const std::string csv = ablation_csv(masks);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 7);
}
