// SPDX-License-Identifier: Apache-2.0
#include "openus/probe.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <map>
#include <numeric>
#include <stdexcept>

namespace openus {

namespace fs = std::filesystem;

std::vector<std::vector<double>> extract_features(const EncoderParams<float>& encoder, const EncoderConfig& config,
                                                  const std::vector<ImageRecord>& records) {
  std::vector<std::vector<double>> out(records.size());
  std::vector<std::exception_ptr> errors(records.size());
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < records.size(); ++i) {
    try {
      const GrayImage img = resize_bilinear(records[i].image, config.image_size, config.image_size);
      const Tensor<float> t({img.height, img.width}, std::vector<float>(img.pixels.begin(), img.pixels.end()));
      const EncoderOutput<float> o = encode(t, config, encoder);
      out[i].assign(o.cls_token.data().begin(), o.cls_token.data().end());
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

void stratified_split(const std::vector<int>& labels, double train_fraction, std::mt19937_64& rng,
                      std::vector<std::size_t>& train, std::vector<std::size_t>& test) {
  train.clear();
  test.clear();
  for (int cls : {0, 1}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == cls) idx.push_back(i);
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n_train = static_cast<std::size_t>(std::lround(train_fraction * static_cast<double>(idx.size())));
    train.insert(train.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    test.insert(test.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
  }
  auto both = [&](const std::vector<std::size_t>& s) {
    bool has[2] = {false, false};
    for (std::size_t i : s) has[labels[i] != 0] = true;
    return has[0] && has[1];
  };
  if (!both(train) || !both(test)) throw std::invalid_argument("probe split holds a single class");
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
}

namespace {
double f1_for(const std::vector<int>& pred, const std::vector<int>& truth, int positive) {
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] == positive && truth[i] == positive) ++tp;
    else if (pred[i] == positive) ++fp;
    else if (truth[i] == positive) ++fn;
  }
  if (tp == 0) return 0.0;
  return 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
}

void mean_std(const std::vector<double>& v, double& mean, double& sd) {
  mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0;
  for (double x : v) ss += (x - mean) * (x - mean);
  sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
}
}  // namespace

double binary_f1(const std::vector<int>& predicted, const std::vector<int>& truth) {
  return f1_for(predicted, truth, 1);
}

double macro_f1(const std::vector<int>& predicted, const std::vector<int>& truth) {
  return 0.5 * (f1_for(predicted, truth, 0) + f1_for(predicted, truth, 1));
}

ProbeReport linear_probe(const std::vector<std::vector<double>>& features, const std::vector<int>& labels_in,
                         const std::vector<std::uint64_t>& seeds, const ProbeConfig& config) {
  if (features.size() != labels_in.size() || features.empty()) throw std::invalid_argument("probe: bad task size");
  if (seeds.empty()) throw std::invalid_argument("probe: no seeds");
  const std::size_t dim = features[0].size();
  ProbeReport report;
  for (std::uint64_t seed : seeds) {
    std::mt19937_64 rng(seed);
    std::vector<int> labels = labels_in;
    if (config.shuffle_labels) std::shuffle(labels.begin(), labels.end(), rng);
    std::vector<std::size_t> train, test;
    stratified_split(labels, config.train_fraction, rng, train, test);

    std::vector<double> mu(dim, 0.0), sd(dim, 0.0);
    for (std::size_t i : train)
      for (std::size_t j = 0; j < dim; ++j) mu[j] += features[i][j];
    for (double& m : mu) m /= static_cast<double>(train.size());
    for (std::size_t i : train)
      for (std::size_t j = 0; j < dim; ++j) sd[j] += (features[i][j] - mu[j]) * (features[i][j] - mu[j]);
    for (double& s : sd) s = std::sqrt(s / static_cast<double>(train.size())) + 1e-8;
    auto z = [&](std::size_t i) {
      std::vector<double> v(dim);
      for (std::size_t j = 0; j < dim; ++j) v[j] = (features[i][j] - mu[j]) / sd[j];
      return v;
    };

    // Two-way softmax head, W [2 x dim], b [2].
    std::normal_distribution<double> init(0.0, 0.01);
    std::vector<double> w(2 * dim), b(2, 0.0), vw(2 * dim, 0.0), vb(2, 0.0);
    for (double& x : w) x = init(rng);
    std::vector<std::size_t> order = train;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
        const std::size_t end = std::min(order.size(), start + config.batch_size);
        std::vector<double> gw(2 * dim, 0.0), gb(2, 0.0);
        for (std::size_t k = start; k < end; ++k) {
          const std::vector<double> x = z(order[k]);
          double logit[2];
          for (int c = 0; c < 2; ++c) {
            logit[c] = b[c];
            for (std::size_t j = 0; j < dim; ++j) logit[c] += w[c * dim + j] * x[j];
          }
          const double mx = std::max(logit[0], logit[1]);
          const double e0 = std::exp(logit[0] - mx), e1 = std::exp(logit[1] - mx);
          const double p[2] = {e0 / (e0 + e1), e1 / (e0 + e1)};
          for (int c = 0; c < 2; ++c) {
            const double d = p[c] - (labels[order[k]] == c ? 1.0 : 0.0);
            gb[c] += d;
            for (std::size_t j = 0; j < dim; ++j) gw[c * dim + j] += d * x[j];
          }
        }
        const double inv = 1.0 / static_cast<double>(end - start);
        for (std::size_t j = 0; j < w.size(); ++j) {
          vw[j] = config.momentum * vw[j] + gw[j] * inv;
          w[j] -= config.lr * vw[j];
        }
        for (int c = 0; c < 2; ++c) {
          vb[c] = config.momentum * vb[c] + gb[c] * inv;
          b[c] -= config.lr * vb[c];
        }
      }
    }

    std::vector<int> pred, truth;
    for (std::size_t i : test) {
      const std::vector<double> x = z(i);
      double logit[2];
      for (int c = 0; c < 2; ++c) {
        logit[c] = b[c];
        for (std::size_t j = 0; j < dim; ++j) logit[c] += w[c * dim + j] * x[j];
      }
      pred.push_back(logit[1] > logit[0] ? 1 : 0);
      truth.push_back(labels[i]);
    }
    ProbeSeedResult r;
    r.seed = seed;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == truth[i];
    r.accuracy = static_cast<double>(correct) / static_cast<double>(pred.size());
    r.f1_binary = binary_f1(pred, truth);
    r.f1_macro = macro_f1(pred, truth);
    report.seeds.push_back(r);
  }
  std::vector<double> acc, f1, f1m;
  for (const auto& r : report.seeds) acc.push_back(r.accuracy), f1.push_back(r.f1_binary), f1m.push_back(r.f1_macro);
  mean_std(acc, report.acc_mean, report.acc_std);
  mean_std(f1, report.f1_mean, report.f1_std);
  mean_std(f1m, report.f1_macro_mean, report.f1_macro_std);
  return report;
}

ProbeReport linear_probe(const TrainState& state, const std::vector<ImageRecord>& task,
                         const std::vector<std::uint64_t>& seeds, const ProbeConfig& config) {
  auto digest = [&]() {
    std::uint64_t h = 0xcbf29ce484222325ull;
    Backbone<float> copy = state.teacher;
    for_each_param(copy, "", [&](const std::string&, Tensor<float>& t, bool) {
      for (float v : t.data()) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        h = (h ^ bits) * 0x100000001b3ull;
      }
    });
    return h;
  };
  const std::uint64_t before = digest();
  std::vector<int> labels;
  for (const ImageRecord& r : task) labels.push_back(r.label());
  const ProbeReport report =
      linear_probe(extract_features(state.teacher.encoder, state.config.encoder, task), labels, seeds, config);
  if (digest() != before) throw std::logic_error("probe modified encoder parameters");
  return report;
}

std::vector<ImageRecord> load_probe_task(const fs::path& dir) {
  std::vector<ImageRecord> records = load_corpus(dir);
  std::map<std::string, ManifestEntry> manifest;
  for (ManifestEntry& e : read_manifest(dir / "manifest.txt")) manifest[e.id] = std::move(e);
  for (ImageRecord& r : records) {
    auto it = manifest.find(r.id);
    if (it == manifest.end()) throw std::invalid_argument("no manifest line for " + r.id);
    r.seed = it->second.seed;
    r.lesions = it->second.boxes;
  }
  return records;
}

std::string format_probe_report(const ProbeReport& r) {
  std::string out = "seed,accuracy,f1_binary,f1_macro\n";
  char buf[160];
  for (const auto& s : r.seeds) {
    std::snprintf(buf, sizeof buf, "%llu,%.6f,%.6f,%.6f\n", static_cast<unsigned long long>(s.seed), s.accuracy,
                  s.f1_binary, s.f1_macro);
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "mean,%.6f,%.6f,%.6f\nstd,%.6f,%.6f,%.6f\n", r.acc_mean, r.f1_mean, r.f1_macro_mean,
                r.acc_std, r.f1_std, r.f1_macro_std);
  return out + buf;
}

// -- ablation ---------------------------------------------------------------

std::vector<AblationRow> ablation_grid(AblationMode mode) {
  std::vector<AblationRow> rows;
  if (mode == AblationMode::masks) {
    for (const char* views : {"single", "multi"})
      for (auto g : {GlobalMaskStrategy::rbw, GlobalMaskStrategy::attention, GlobalMaskStrategy::self_adaptive}) {
        AblationRow r;
        r.views = views;
        r.global_mask = g;
        r.local_mask = std::string(views) == "multi" ? LocalMaskStrategy::rbw : LocalMaskStrategy::none;
        r.name = to_string(g) + "/" + views;
        rows.push_back(r);
      }
  } else {
    const bool grid[4][2] = {{false, false}, {true, false}, {false, true}, {true, true}};
    const char* names[4] = {"cl", "cl+mim_global", "cl+mim_local", "cl+mim_global+mim_local"};
    for (int i = 0; i < 4; ++i) {
      AblationRow r;
      r.name = names[i];
      r.views = "multi";
      r.global_mask = GlobalMaskStrategy::self_adaptive;
      r.local_mask = LocalMaskStrategy::rbw;
      r.toggles = {true, true, grid[i][0], grid[i][1]};
      rows.push_back(r);
    }
  }
  return rows;
}

std::vector<AblationRow> run_ablation(const AblationSpec& spec, const std::vector<ImageRecord>& corpus,
                                      const std::function<void(const AblationRow&)>& on_row) {
  std::vector<AblationRow> rows = ablation_grid(spec.mode);
  for (AblationRow& row : rows) {
    TrainConfig c = spec.base;
    c.global_mask = row.global_mask;
    c.local_mask = row.local_mask;
    if (spec.mode == AblationMode::components) c.toggles = row.toggles;
    else row.toggles = c.toggles;
    const PretrainResult run = pretrain(c, corpus, std::nullopt);
    row.final_loss = run.rows.empty() ? 0.0 : run.rows.back().loss_total;
    row.metrics = run.rows;
    row.probe = linear_probe(run.state, spec.task, spec.seeds, spec.probe);
    if (on_row) on_row(row);
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out =
      "name,views,global_mask,local_mask,loss_cls,loss_patch,loss_recon_g,loss_recon_l,final_loss_total,acc_mean,"
      "acc_std,f1_mean,f1_std,f1_macro_mean\n";
  char buf[512];
  for (const AblationRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%s,%s,%s,%d,%d,%d,%d,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n", r.name.c_str(),
                  r.views.c_str(), to_string(r.global_mask).c_str(), to_string(r.local_mask).c_str(), r.toggles.cls,
                  r.toggles.patch, r.toggles.recon_global, r.toggles.recon_local, r.final_loss, r.probe.acc_mean,
                  r.probe.acc_std, r.probe.f1_mean, r.probe.f1_std, r.probe.f1_macro_mean);
    out += buf;
  }
  return out;
}

AblationSpec load_ablation_spec(const fs::path& path) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::ini_parser::read_ini(path.string(), tree);
  } catch (const pt::ini_parser_error& e) {
    throw std::invalid_argument(std::string("ablation grid: ") + e.what());
  }
  AblationSpec spec;
  const fs::path base = path.parent_path();
  auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : base / p; };
  const auto& ab = tree.get_child("ablate", pt::ptree());
  if (const auto cfg = ab.get_optional<std::string>("config")) spec.base = load_config(resolve(*cfg));
  const std::string mode = ab.get<std::string>("mode", "masks");
  if (mode == "masks") spec.mode = AblationMode::masks;
  else if (mode == "components") spec.mode = AblationMode::components;
  else throw std::invalid_argument("ablation mode must be masks or components");
  if (const auto seeds = ab.get_optional<std::string>("seeds")) {
    spec.seeds.clear();
    for (std::size_t i = 0; i < std::stoull(*seeds); ++i) spec.seeds.push_back(i);
  }
  if (const auto task = ab.get_optional<std::string>("task")) {
    spec.task = load_probe_task(resolve(*task));
  } else {
    SpecklePhantomSpec s = spec.base.synth;
    s.seed = ab.get<std::uint64_t>("task_seed", 100000);
    spec.task = synth_corpus(s, ab.get<std::size_t>("task_count", 200));
  }
  spec.probe.epochs = ab.get<std::size_t>("probe_epochs", spec.probe.epochs);
  for (const auto& [section, body] : tree) {
    if (section == "ablate") continue;
    for (const auto& [key, value] : body) set_config_item(spec.base, section + "." + key, value.data());
  }
  spec.base.validate();
  return spec;
}

}  // namespace openus
