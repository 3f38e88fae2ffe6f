// SPDX-License-Identifier: Apache-2.0
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>

#include "openus/trainer.hpp"

namespace openus {

std::string to_string(GlobalMaskStrategy s) {
  switch (s) {
    case GlobalMaskStrategy::self_adaptive: return "self_adaptive";
    case GlobalMaskStrategy::attention: return "attention";
    case GlobalMaskStrategy::reconstruction: return "reconstruction";
    case GlobalMaskStrategy::rbw: return "rbw";
    case GlobalMaskStrategy::none: return "none";
  }
  return "?";
}

std::string to_string(LocalMaskStrategy s) { return s == LocalMaskStrategy::rbw ? "rbw" : "none"; }

GlobalMaskStrategy parse_global_mask(const std::string& s) {
  for (auto v : {GlobalMaskStrategy::self_adaptive, GlobalMaskStrategy::attention, GlobalMaskStrategy::reconstruction,
                 GlobalMaskStrategy::rbw, GlobalMaskStrategy::none})
    if (to_string(v) == s) return v;
  throw std::invalid_argument("unknown global mask strategy '" + s + "'");
}

LocalMaskStrategy parse_local_mask(const std::string& s) {
  if (s == "rbw") return LocalMaskStrategy::rbw;
  if (s == "none") return LocalMaskStrategy::none;
  throw std::invalid_argument("unknown local mask strategy '" + s + "'");
}

namespace {

std::string fmt(std::size_t v) { return std::to_string(v); }
std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
std::string fmt(bool v) { return v ? "true" : "false"; }
std::string fmt(const std::string& v) { return v; }
std::string fmt(GlobalMaskStrategy v) { return to_string(v); }
std::string fmt(LocalMaskStrategy v) { return to_string(v); }
std::string fmt(AttentionForm v) { return v == AttentionForm::weighted ? "weighted" : "plain"; }
std::string fmt(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

void parse(const std::string& s, std::size_t& out) {
  std::size_t pos = 0;
  if (s.empty() || s[0] == '-') throw std::invalid_argument("expected a non-negative integer, got '" + s + "'");
  out = std::stoull(s, &pos);
  if (pos != s.size()) throw std::invalid_argument("expected an integer, got '" + s + "'");
}
void parse(const std::string& s, double& out) {
  std::size_t pos = 0;
  out = std::stod(s, &pos);
  if (pos != s.size()) throw std::invalid_argument("expected a number, got '" + s + "'");
}
void parse(const std::string& s, bool& out) {
  if (s == "true" || s == "1") out = true;
  else if (s == "false" || s == "0") out = false;
  else throw std::invalid_argument("expected true/false, got '" + s + "'");
}
void parse(const std::string& s, std::string& out) { out = s; }
void parse(const std::string& s, GlobalMaskStrategy& out) { out = parse_global_mask(s); }
void parse(const std::string& s, LocalMaskStrategy& out) { out = parse_local_mask(s); }
void parse(const std::string& s, AttentionForm& out) {
  if (s == "weighted") out = AttentionForm::weighted;
  else if (s == "plain") out = AttentionForm::plain;
  else throw std::invalid_argument("attention_form must be weighted or plain");
}
void parse(const std::string& s, std::vector<std::size_t>& out) {
  out.clear();
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t v = 0;
    parse(item, v);
    out.push_back(v);
  }
  if (out.empty()) throw std::invalid_argument("expected a comma-separated list");
}

struct Field {
  std::string key;
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(TrainConfig&, const std::string&)> set;
};

template <typename Acc>
Field field(std::string key, Acc acc) {
  return {std::move(key), [acc](const TrainConfig& c) { return fmt(acc(c)); },
          [acc](TrainConfig& c, const std::string& s) { parse(s, acc(c)); }};
}

#define OPENUS_FIELD(key, expr) field(key, [](auto& c) -> auto& { return expr; })

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      OPENUS_FIELD("train.epochs", c.epochs),
      OPENUS_FIELD("train.warmup_epochs", c.warmup_epochs),
      OPENUS_FIELD("train.batch_size", c.batch_size),
      OPENUS_FIELD("train.base_lr", c.base_lr),
      OPENUS_FIELD("train.weight_decay", c.weight_decay),
      OPENUS_FIELD("train.beta1", c.beta1),
      OPENUS_FIELD("train.beta2", c.beta2),
      OPENUS_FIELD("train.adam_eps", c.adam_eps),
      OPENUS_FIELD("train.clip_norm", c.clip_norm),
      OPENUS_FIELD("train.tau_t", c.tau_t),
      OPENUS_FIELD("train.tau_s", c.tau_s),
      OPENUS_FIELD("train.lambda", c.lambda),
      OPENUS_FIELD("train.center_decay", c.center_decay),
      OPENUS_FIELD("train.centering", c.centering),
      OPENUS_FIELD("train.freeze_center", c.freeze_center),
      OPENUS_FIELD("train.student_global_cls", c.student_global_cls),
      OPENUS_FIELD("train.reseed_each_epoch", c.reseed_each_epoch),
      OPENUS_FIELD("train.seed", c.seed),
      OPENUS_FIELD("train.checkpoint_every", c.checkpoint_every),
      OPENUS_FIELD("masking.rat_m", c.rat_m),
      OPENUS_FIELD("masking.r0", c.r0),
      OPENUS_FIELD("masking.rT", c.rT),
      OPENUS_FIELD("masking.alpha_min", c.alpha_min),
      OPENUS_FIELD("masking.alpha_max", c.alpha_max),
      OPENUS_FIELD("masking.local_mask_ratio", c.local_mask_ratio),
      OPENUS_FIELD("masking.rec_ema_decay", c.rec_ema_decay),
      OPENUS_FIELD("masking.global_mask", c.global_mask),
      OPENUS_FIELD("masking.local_mask", c.local_mask),
      OPENUS_FIELD("loss.cls", c.toggles.cls),
      OPENUS_FIELD("loss.patch", c.toggles.patch),
      OPENUS_FIELD("loss.recon_global", c.toggles.recon_global),
      OPENUS_FIELD("loss.recon_local", c.toggles.recon_local),
      OPENUS_FIELD("loss.weight_cls", c.weights.cls),
      OPENUS_FIELD("loss.weight_patch", c.weights.patch),
      OPENUS_FIELD("loss.weight_recon_global", c.weights.recon_global),
      OPENUS_FIELD("loss.weight_recon_local", c.weights.recon_local),
      OPENUS_FIELD("encoder.image_size", c.encoder.image_size),
      OPENUS_FIELD("encoder.stem_patch", c.encoder.stem_patch),
      OPENUS_FIELD("encoder.stages", c.encoder.stages),
      OPENUS_FIELD("encoder.stage_dims", c.encoder.stage_dims),
      OPENUS_FIELD("encoder.depths", c.encoder.depths),
      OPENUS_FIELD("encoder.state_dim", c.encoder.state_dim),
      OPENUS_FIELD("encoder.scan_directions", c.encoder.scan_directions),
      OPENUS_FIELD("encoder.mlp_ratio", c.encoder.mlp_ratio),
      OPENUS_FIELD("encoder.attention_form", c.encoder.attention_form),
      OPENUS_FIELD("head.hidden", c.head.hidden),
      OPENUS_FIELD("head.bottleneck", c.head.bottleneck),
      OPENUS_FIELD("head.prototypes", c.head.prototypes),
      OPENUS_FIELD("views.global_views", c.views.global_views),
      OPENUS_FIELD("views.local_views", c.views.local_views),
      OPENUS_FIELD("views.global_size", c.views.global_size),
      OPENUS_FIELD("views.local_size", c.views.local_size),
      OPENUS_FIELD("views.global_scale_min", c.views.global_scale_min),
      OPENUS_FIELD("views.global_scale_max", c.views.global_scale_max),
      OPENUS_FIELD("views.local_scale_min", c.views.local_scale_min),
      OPENUS_FIELD("views.local_scale_max", c.views.local_scale_max),
      OPENUS_FIELD("views.aspect_min", c.views.aspect_min),
      OPENUS_FIELD("views.aspect_max", c.views.aspect_max),
      OPENUS_FIELD("augment.p_flip", c.views.augment.p_flip),
      OPENUS_FIELD("augment.p_jitter", c.views.augment.p_jitter),
      OPENUS_FIELD("augment.p_blur", c.views.augment.p_blur),
      OPENUS_FIELD("augment.p_gamma", c.views.augment.p_gamma),
      OPENUS_FIELD("augment.scale_min", c.views.augment.scale_min),
      OPENUS_FIELD("augment.scale_max", c.views.augment.scale_max),
      OPENUS_FIELD("augment.shift_min", c.views.augment.shift_min),
      OPENUS_FIELD("augment.shift_max", c.views.augment.shift_max),
      OPENUS_FIELD("augment.sigma_min", c.views.augment.sigma_min),
      OPENUS_FIELD("augment.sigma_max", c.views.augment.sigma_max),
      OPENUS_FIELD("augment.gamma_min", c.views.augment.gamma_min),
      OPENUS_FIELD("augment.gamma_max", c.views.augment.gamma_max),
      OPENUS_FIELD("data.corpus_dir", c.corpus_dir),
      OPENUS_FIELD("data.synth_count", c.synth_count),
      OPENUS_FIELD("data.size", c.synth.size),
      OPENUS_FIELD("data.lesion_min", c.synth.lesion_min),
      OPENUS_FIELD("data.lesion_max", c.synth.lesion_max),
      OPENUS_FIELD("data.lesion_free_fraction", c.synth.lesion_free_fraction),
      OPENUS_FIELD("data.contrast_min", c.synth.contrast_min),
      OPENUS_FIELD("data.contrast_max", c.synth.contrast_max),
      OPENUS_FIELD("data.radius_min", c.synth.radius_min),
      OPENUS_FIELD("data.radius_max", c.synth.radius_max),
      OPENUS_FIELD("data.hyper_fraction", c.synth.hyper_fraction),
      OPENUS_FIELD("data.background", c.synth.background),
      OPENUS_FIELD("data.attenuation", c.synth.attenuation),
      OPENUS_FIELD("data.tissue_variation", c.synth.tissue_variation),
      OPENUS_FIELD("data.speckle_shape", c.synth.speckle_shape),
      OPENUS_FIELD("data.seed", c.synth.seed),
  };
  return table;
}

#undef OPENUS_FIELD

}  // namespace

std::vector<std::pair<std::string, std::string>> config_items(const TrainConfig& config) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const Field& f : fields()) out.emplace_back(f.key, f.get(config));
  return out;
}

void set_config_item(TrainConfig& config, const std::string& key, const std::string& value) {
  for (const Field& f : fields())
    if (f.key == key) {
      try {
        f.set(config, value);
      } catch (const std::exception& e) {
        throw std::invalid_argument(key + ": " + e.what());
      }
      return;
    }
  throw std::invalid_argument("unknown config key '" + key + "'");
}

TrainConfig parse_config(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }
  TrainConfig c;
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw std::invalid_argument("config key '" + section + "' is outside a [section]");
    for (const auto& [key, value] : body) set_config_item(c, section + "." + key, value.data());
  }
  c.validate();
  return c;
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string format_config(const TrainConfig& config) {
  std::string out, section;
  for (const auto& [key, value] : config_items(config)) {
    const std::string sec = key.substr(0, key.find('.'));
    if (sec != section) {
      out += (out.empty() ? "[" : "\n[") + sec + "]\n";
      section = sec;
    }
    out += key.substr(sec.size() + 1) + " = " + value + "\n";
  }
  return out;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("train config: " + m); };
  encoder.validate();
  if (epochs == 0) fail("epochs must be positive");
  if (warmup_epochs >= epochs) fail("warmup_epochs must be smaller than epochs");
  if (batch_size == 0) fail("batch_size must be positive");
  if (!(base_lr >= 0)) fail("base_lr must be non-negative");
  if (!(weight_decay >= 0)) fail("weight_decay must be non-negative");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) fail("betas must lie in [0, 1)");
  if (!(tau_t > 0 && tau_s > 0)) fail("temperatures must be positive");
  if (!(lambda >= 0 && lambda <= 1)) fail("lambda must lie in [0, 1]");
  if (!(center_decay >= 0 && center_decay <= 1)) fail("center_decay must lie in [0, 1]");
  if (!(rat_m > 0 && rat_m <= 1)) fail("rat_m must lie in (0, 1]");
  if (!(local_mask_ratio > 0 && local_mask_ratio <= 1)) fail("local_mask_ratio must lie in (0, 1]");
  if (!(rec_ema_decay >= 0 && rec_ema_decay < 1)) fail("rec_ema_decay must lie in [0, 1)");
  MaskScheduleState{0, 1, r0, rT, alpha_min, alpha_max}.validate();
  if (!(toggles.cls || toggles.patch || toggles.recon_global || toggles.recon_local)) fail("all loss terms disabled");
  if (views.global_views == 0) fail("need at least one global view");
  if (views.global_size != encoder.image_size) fail("views.global_size must equal encoder.image_size");
  const std::size_t down = encoder.total_downsample();
  if (views.local_views > 0 && views.local_size % down != 0)
    fail("views.local_size must be divisible by the total downsampling factor");
  if (toggles.cls && views.local_views == 0 && !(student_global_cls && views.global_views > 1))
    fail("the cls loss needs local views (or student_global_cls with two global views)");
  if (head.prototypes == 0 || head.hidden == 0 || head.bottleneck == 0) fail("head sizes must be positive");
  if (corpus_dir.empty() && synth_count == 0) fail("synthetic corpus needs synth_count > 0");
}

std::vector<ImageRecord> load_training_corpus(const TrainConfig& config) {
  std::vector<ImageRecord> records =
      config.corpus_dir.empty() ? synth_corpus(config.synth, config.synth_count) : load_corpus(config.corpus_dir);
  if (records.empty()) throw std::invalid_argument("training corpus is empty");
  for (ImageRecord& r : records)
    r.image = resize_bilinear(r.image, config.encoder.image_size, config.encoder.image_size);
  return records;
}

}  // namespace openus
