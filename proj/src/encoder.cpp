// SPDX-License-Identifier: Apache-2.0
#include "openus/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace openus {

void EncoderConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("encoder config: " + msg); };
  if (stages == 0) fail("need at least one stage");
  if (stem_patch == 0) fail("stem_patch must be positive");
  if (stage_dims.size() != stages) fail("stage_dims must list one dim per stage");
  if (depths.size() != stages) fail("depths must list one depth per stage");
  for (std::size_t d : depths)
    if (d == 0) fail("every stage needs at least one block");
  for (std::size_t d : stage_dims)
    if (d < state_dim) fail("stage dims must be >= state_dim");
  if (state_dim == 0) fail("state_dim must be positive");
  if (stage_dims[0] % 4 != 0) fail("first stage dim must be a multiple of 4 (2-D position code)");
  if (scan_directions != 1 && scan_directions != 2 && scan_directions != 4) fail("scan_directions must be 1, 2 or 4");
  if (!(mlp_ratio > 0)) fail("mlp_ratio must be positive");
  if (image_size % stem_patch != 0) fail("image_size must be divisible by stem_patch");
  if (image_size % total_downsample() != 0) fail("image_size must be divisible by the total downsampling factor");
}

std::size_t EncoderConfig::total_downsample() const { return stem_patch << (stages - 1); }

namespace {

template <typename T>
Tensor<T> normal_tensor(Shape shape, double stddev, std::mt19937_64& rng, bool requires_grad) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<T> v(shape_numel(shape));
  for (T& x : v) x = static_cast<T>(dist(rng));
  return Tensor<T>(std::move(shape), std::move(v), requires_grad);
}

template <typename T>
Linear<T> make_linear(std::size_t in, std::size_t out, double stddev, std::mt19937_64& rng, bool rg) {
  return {normal_tensor<T>({in, out}, stddev, rng, rg), Tensor<T>::zeros({out}, rg)};
}

template <typename T>
Linear<T> make_linear(std::size_t in, std::size_t out, std::mt19937_64& rng, bool rg) {
  return make_linear<T>(in, out, 1.0 / std::sqrt(static_cast<double>(in)), rng, rg);
}

template <typename T>
Norm<T> make_norm(std::size_t d, bool rg) {
  return {Tensor<T>::full({d}, T(1), rg), Tensor<T>::zeros({d}, rg)};
}

template <typename T>
VSSBlockParams<T> make_block(const EncoderConfig& config, std::size_t dim, std::mt19937_64& rng, bool rg) {
  VSSBlockParams<T> b;
  const std::size_t nst = config.state_dim;
  const auto hidden = static_cast<std::size_t>(std::lround(config.mlp_ratio * static_cast<double>(dim)));
  b.ln1 = make_norm<T>(dim, rg);
  b.in_x = make_linear<T>(dim, dim, rng, rg);
  b.in_z = make_linear<T>(dim, dim, rng, rg);
  std::uniform_real_distribution<double> log_dt(std::log(1e-3), std::log(1e-1));
  for (std::size_t d = 0; d < config.scan_directions; ++d) {
    ScanDirectionParams<T> dir;
    dir.delta_proj = make_linear<T>(dim, 1, 0.1 / std::sqrt(static_cast<double>(dim)), rng, rg);
    // softplus(bias) = dt, with dt log-uniform in [1e-3, 1e-1].
    const double dt = std::exp(log_dt(rng));
    dir.delta_proj.bias = Tensor<T>({1}, {static_cast<T>(std::log(std::expm1(dt)))}, rg);
    dir.b_proj = make_linear<T>(dim, nst, rng, rg);
    dir.c_proj = make_linear<T>(dim, nst, rng, rg);
    std::vector<T> a_log(nst);
    for (std::size_t n = 0; n < nst; ++n) a_log[n] = static_cast<T>(std::log(static_cast<double>(n + 1)));
    dir.a_log = Tensor<T>({nst}, std::move(a_log), rg);
    b.directions.push_back(std::move(dir));
  }
  b.out_proj = make_linear<T>(dim, dim, rng, rg);
  b.ln2 = make_norm<T>(dim, rg);
  b.mlp_in = make_linear<T>(dim, hidden, rng, rg);
  b.mlp_out = make_linear<T>(hidden, dim, rng, rg);
  return b;
}

bool is_identity(std::span<const std::size_t> order) {
  for (std::size_t i = 0; i < order.size(); ++i)
    if (order[i] != i) return false;
  return true;
}

std::vector<std::size_t> inverse(std::span<const std::size_t> order) {
  std::vector<std::size_t> inv(order.size());
  for (std::size_t k = 0; k < order.size(); ++k) inv[order[k]] = k;
  return inv;
}

template <typename T>
Tensor<T> merge_tokens(const Tensor<T>& x, std::size_t gh, std::size_t gw, const StageParams<T>& st) {
  if (gh % 2 != 0 || gw % 2 != 0) throw ShapeError("token merge needs an even grid");
  const std::size_t h2 = gh / 2, w2 = gw / 2;
  std::vector<std::vector<std::size_t>> corners(4, std::vector<std::size_t>(h2 * w2));
  for (std::size_t r = 0; r < h2; ++r)
    for (std::size_t c = 0; c < w2; ++c) {
      const std::size_t base = (2 * r) * gw + 2 * c;
      const std::size_t t = r * w2 + c;
      corners[0][t] = base;
      corners[1][t] = base + 1;
      corners[2][t] = base + gw;
      corners[3][t] = base + gw + 1;
    }
  std::vector<Tensor<T>> parts;
  for (const auto& idx : corners) parts.push_back(gather(x, idx));
  const Tensor<T> merged = concat(parts, 1);
  return linear(layernorm(merged, st.merge_norm.gamma, st.merge_norm.beta), st.merge.weight, st.merge.bias);
}

}  // namespace

template <typename T>
EncoderParams<T> init_encoder(const EncoderConfig& config, std::mt19937_64& rng, bool requires_grad) {
  config.validate();
  EncoderParams<T> p;
  const std::size_t d0 = config.stage_dims[0];
  const std::size_t patch_px = config.stem_patch * config.stem_patch;
  p.stem = make_linear<T>(patch_px, d0, rng, requires_grad);
  p.mask_token = normal_tensor<T>({d0}, 0.02, rng, requires_grad);
  for (std::size_t s = 0; s < config.stages; ++s) {
    StageParams<T> st;
    const std::size_t dim = config.stage_dims[s];
    if (s > 0) {
      const std::size_t prev = config.stage_dims[s - 1];
      st.merge_norm = make_norm<T>(4 * prev, requires_grad);
      st.merge = make_linear<T>(4 * prev, dim, rng, requires_grad);
    }
    for (std::size_t b = 0; b < config.depths[s]; ++b) st.blocks.push_back(make_block<T>(config, dim, rng, requires_grad));
    p.stages.push_back(std::move(st));
  }
  p.final_norm = make_norm<T>(config.stage_dims.back(), requires_grad);
  return p;
}

std::vector<std::size_t> scan_order(std::size_t grid_h, std::size_t grid_w, std::size_t direction) {
  const std::size_t n = grid_h * grid_w;
  std::vector<std::size_t> order(n);
  switch (direction) {
    case 0:
    case 1:
      for (std::size_t i = 0; i < n; ++i) order[i] = i;
      break;
    case 2:
    case 3:
      for (std::size_t c = 0, k = 0; c < grid_w; ++c)
        for (std::size_t r = 0; r < grid_h; ++r) order[k++] = r * grid_w + c;
      break;
    default:
      throw std::invalid_argument("scan direction must be 0..3");
  }
  if (direction == 1 || direction == 3) std::reverse(order.begin(), order.end());
  return order;
}

std::vector<double> position_code(std::size_t grid_h, std::size_t grid_w, std::size_t dim) {
  if (dim % 4 != 0) throw std::invalid_argument("position code dim must be a multiple of 4");
  const std::size_t half = dim / 2;
  std::vector<double> code(grid_h * grid_w * dim);
  for (std::size_t r = 0; r < grid_h; ++r)
    for (std::size_t c = 0; c < grid_w; ++c) {
      double* row = code.data() + (r * grid_w + c) * dim;
      for (std::size_t k = 0; k < half / 2; ++k) {
        const double freq = std::pow(10000.0, -2.0 * static_cast<double>(k) / static_cast<double>(half));
        row[2 * k] = std::sin(static_cast<double>(r) * freq);
        row[2 * k + 1] = std::cos(static_cast<double>(r) * freq);
        row[half + 2 * k] = std::sin(static_cast<double>(c) * freq);
        row[half + 2 * k + 1] = std::cos(static_cast<double>(c) * freq);
      }
    }
  return code;
}

template <typename T>
Tensor<T> patchify_stem(const Tensor<T>& image, const EncoderConfig& config, const EncoderParams<T>& params,
                        std::span<const std::uint8_t> mask) {
  const Shape& s = image.shape();
  std::size_t h = 0, w = 0;
  if (s.size() == 2) {
    h = s[0], w = s[1];
  } else if (s.size() == 3 && s[0] == 1) {
    h = s[1], w = s[2];
  } else {
    throw ShapeError("stem expects a [H x W] or [1 x H x W] image, got " + shape_str(s));
  }
  const std::size_t p = config.stem_patch;
  if (h % p != 0 || w % p != 0)
    throw ShapeError("image " + shape_str(s) + " is not divisible by stem patch " + std::to_string(p));
  const std::size_t gh = h / p, gw = w / p, n = gh * gw;
  const std::size_t dim = params.mask_token.numel();
  if (!mask.empty() && mask.size() != n) throw ShapeError("mask does not match the stem grid");

  auto px = image.data();
  std::vector<T> patches(n * p * p);
  for (std::size_t gr = 0; gr < gh; ++gr)
    for (std::size_t gc = 0; gc < gw; ++gc)
      for (std::size_t y = 0; y < p; ++y)
        for (std::size_t x = 0; x < p; ++x)
          patches[((gr * gw + gc) * p + y) * p + x] = px[(gr * p + y) * w + gc * p + x];

  Tensor<T> tokens = linear(Tensor<T>({n, p * p}, std::move(patches)), params.stem.weight, params.stem.bias);
  if (!mask.empty()) {
    std::vector<T> keep(n * dim), hide(n * dim);
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t j = 0; j < dim; ++j) {
        hide[t * dim + j] = mask[t] ? T(1) : T(0);
        keep[t * dim + j] = T(1) - hide[t * dim + j];
      }
    tokens = add(mul(tokens, Tensor<T>({n, dim}, std::move(keep))),
                 mul(tile_rows(params.mask_token, n), Tensor<T>({n, dim}, std::move(hide))));
  }
  const std::vector<double> code = position_code(gh, gw, dim);
  return add(tokens, Tensor<T>({n, dim}, std::vector<T>(code.begin(), code.end())));
}

template <typename T>
ScanProjections<T> scan_projections(const Tensor<T>& tokens, const ScanDirectionParams<T>& params,
                                    std::span<const std::size_t> order) {
  ScanProjections<T> p;
  const std::size_t len = tokens.size(0);
  p.u = is_identity(order) ? tokens : gather(tokens, std::vector<std::size_t>(order.begin(), order.end()));
  p.delta = reshape(softplus(linear(p.u, params.delta_proj.weight, params.delta_proj.bias)), {len});
  p.a = neg(exp(params.a_log));
  p.b = linear(p.u, params.b_proj.weight, params.b_proj.bias);
  p.c = linear(p.u, params.c_proj.weight, params.c_proj.bias);
  return p;
}

template <typename T>
Tensor<T> selective_scan(const Tensor<T>& tokens, const ScanDirectionParams<T>& params, std::size_t grid_h,
                         std::size_t grid_w, std::size_t direction) {
  if (tokens.rank() != 2 || tokens.size(0) != grid_h * grid_w) throw ShapeError("scan tokens do not match grid");
  const std::vector<std::size_t> order = scan_order(grid_h, grid_w, direction);
  const ScanProjections<T> p = scan_projections(tokens, params, order);
  Tensor<T> y = selective_scan(p.u, p.delta, p.a, p.b, p.c);
  return is_identity(order) ? y : gather(y, inverse(order));
}

template <typename T>
AttentionFormResult<T> ssm_attention_form(const Tensor<T>& tokens, const ScanDirectionParams<T>& params,
                                          std::size_t grid_h, std::size_t grid_w, std::size_t direction) {
  if (tokens.rank() != 2 || tokens.size(0) != grid_h * grid_w) throw ShapeError("scan tokens do not match grid");
  const std::vector<std::size_t> order = scan_order(grid_h, grid_w, direction);
  const ScanProjections<T> p = scan_projections(tokens, params, order);
  AttentionFormResult<T> r;
  r.attention = ssm_attention(p.delta, p.a, p.b, p.c, AttentionForm::weighted);
  const Tensor<T> values = mul(tile_cols(p.delta, p.u.size(1)), p.u);
  Tensor<T> y = matmul(r.attention, values);
  r.y = is_identity(order) ? y : gather(y, inverse(order));
  return r;
}

template <typename T>
ScanIntermediates scan_intermediates(const ScanProjections<T>& proj) {
  ScanIntermediates s;
  s.length = proj.delta.numel();
  s.states = proj.a.numel();
  s.log_w.resize(s.length * s.states);
  s.w.resize(s.length * s.states);
  double cum = 0;
  for (std::size_t i = 0; i < s.length; ++i) {
    cum += static_cast<double>(proj.delta[i]);
    for (std::size_t n = 0; n < s.states; ++n) {
      const double lw = cum * static_cast<double>(proj.a[n]);
      s.log_w[i * s.states + n] = lw;
      const double w = std::exp(lw);
      if (w == 0.0) throw std::range_error("scan weight w underflowed to zero; use log_w");
      s.w[i * s.states + n] = w;
    }
  }
  s.causal_mask.assign(s.length * s.length, 0);
  for (std::size_t i = 0; i < s.length; ++i)
    for (std::size_t j = 0; j <= i; ++j) s.causal_mask[i * s.length + j] = 1;
  return s;
}

template <typename T>
Tensor<T> vss_block(const Tensor<T>& x, const VSSBlockParams<T>& params, std::size_t grid_h, std::size_t grid_w,
                    AttentionForm form, std::vector<RetainedAttention>* retain) {
  const Tensor<T> ln = layernorm(x, params.ln1.gamma, params.ln1.beta);
  const Tensor<T> xin = silu(linear(ln, params.in_x.weight, params.in_x.bias));
  const Tensor<T> gate = silu(linear(ln, params.in_z.weight, params.in_z.bias));
  Tensor<T> mixed;
  for (std::size_t d = 0; d < params.directions.size(); ++d) {
    const Tensor<T> yd = selective_scan(xin, params.directions[d], grid_h, grid_w, d);
    mixed = mixed.defined() ? add(mixed, yd) : yd;
    if (retain) {
      const std::vector<std::size_t> order = scan_order(grid_h, grid_w, d);
      const ScanProjections<T> p = scan_projections(xin.detach(), params.directions[d], order);
      const Tensor<T> att = ssm_attention(p.delta.detach(), p.a.detach(), p.b.detach(), p.c.detach(), form);
      RetainedAttention r;
      r.length = order.size();
      r.matrix.assign(att.data().begin(), att.data().end());
      r.order = order;
      retain->push_back(std::move(r));
    }
  }
  const Tensor<T> x1 = add(x, linear(mul(mixed, gate), params.out_proj.weight, params.out_proj.bias));
  const Tensor<T> ln2 = layernorm(x1, params.ln2.gamma, params.ln2.beta);
  const Tensor<T> hidden = silu(linear(ln2, params.mlp_in.weight, params.mlp_in.bias));
  return add(x1, linear(hidden, params.mlp_out.weight, params.mlp_out.bias));
}

template <typename T>
EncoderOutput<T> encode(const Tensor<T>& image, const EncoderConfig& config, const EncoderParams<T>& params,
                        std::span<const std::uint8_t> mask, bool keep_attention) {
  const std::size_t h = image.shape()[image.rank() - 2];
  const std::size_t w = image.shape()[image.rank() - 1];
  const std::size_t down = config.total_downsample();
  if (h % down != 0 || w % down != 0)
    throw ShapeError("image " + shape_str(image.shape()) + " not divisible by total downsampling " +
                     std::to_string(down));
  EncoderOutput<T> out;
  out.stem_h = h / config.stem_patch;
  out.stem_w = w / config.stem_patch;
  std::size_t gh = out.stem_h, gw = out.stem_w;
  Tensor<T> tokens = patchify_stem(image, config, params, mask);
  for (std::size_t s = 0; s < params.stages.size(); ++s) {
    const StageParams<T>& st = params.stages[s];
    if (s > 0) {
      tokens = merge_tokens(tokens, gh, gw, st);
      gh /= 2;
      gw /= 2;
    }
    for (std::size_t b = 0; b < st.blocks.size(); ++b) {
      const bool last = keep_attention && s + 1 == params.stages.size() && b + 1 == st.blocks.size();
      tokens = vss_block(tokens, st.blocks[b], gh, gw, config.attention_form, last ? &out.last_attention : nullptr);
    }
    out.stage_features.push_back(tokens);
  }
  out.grid_h = gh;
  out.grid_w = gw;
  out.patch_tokens = layernorm(tokens, params.final_norm.gamma, params.final_norm.beta);
  out.cls_token = reduce(ReduceOp::mean, out.patch_tokens, {0});
  return out;
}

std::vector<double> min_max_normalize(std::span<const double> values, bool* constant) {
  std::vector<double> out(values.size(), 0.5);
  if (values.empty()) return out;
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const bool flat = *hi == *lo;
  if (constant) *constant = flat;
  if (flat) return out;
  const double span = *hi - *lo;
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = (values[i] - *lo) / span;
  return out;
}

template <typename T>
AttentionMap extract_attention_map(const EncoderOutput<T>& output) {
  if (output.last_attention.empty()) throw std::logic_error("encoder output carries no attention matrices");
  const std::size_t n = output.grid_h * output.grid_w;
  std::vector<double> received(n, 0.0);
  const double dirs = static_cast<double>(output.last_attention.size());
  for (const RetainedAttention& r : output.last_attention) {
    if (r.length != n) throw ShapeError("retained attention does not match the final grid");
    for (std::size_t j = 0; j < n; ++j) {
      double col = 0;
      for (std::size_t i = 0; i < n; ++i) col += r.matrix[i * n + j];
      received[r.order[j]] += col / static_cast<double>(n) / dirs;
    }
  }
  AttentionMap map;
  map.grid_h = output.stem_h;
  map.grid_w = output.stem_w;
  const std::size_t fy = output.stem_h / output.grid_h, fx = output.stem_w / output.grid_w;
  std::vector<double> up(map.grid_h * map.grid_w);
  for (std::size_t r = 0; r < map.grid_h; ++r)
    for (std::size_t c = 0; c < map.grid_w; ++c) up[r * map.grid_w + c] = received[(r / fy) * output.grid_w + c / fx];
  map.scores = min_max_normalize(up, &map.constant);
  return map;
}

#define OPENUS_INSTANTIATE(T)                                                                                   \
  template EncoderParams<T> init_encoder<T>(const EncoderConfig&, std::mt19937_64&, bool);                     \
  template Tensor<T> patchify_stem<T>(const Tensor<T>&, const EncoderConfig&, const EncoderParams<T>&,         \
                                      std::span<const std::uint8_t>);                                          \
  template ScanProjections<T> scan_projections<T>(const Tensor<T>&, const ScanDirectionParams<T>&,             \
                                                  std::span<const std::size_t>);                               \
  template Tensor<T> selective_scan<T>(const Tensor<T>&, const ScanDirectionParams<T>&, std::size_t,           \
                                       std::size_t, std::size_t);                                              \
  template AttentionFormResult<T> ssm_attention_form<T>(const Tensor<T>&, const ScanDirectionParams<T>&,       \
                                                        std::size_t, std::size_t, std::size_t);                \
  template ScanIntermediates scan_intermediates<T>(const ScanProjections<T>&);                                 \
  template Tensor<T> vss_block<T>(const Tensor<T>&, const VSSBlockParams<T>&, std::size_t, std::size_t,        \
                                  AttentionForm, std::vector<RetainedAttention>*);                             \
  template EncoderOutput<T> encode<T>(const Tensor<T>&, const EncoderConfig&, const EncoderParams<T>&,         \
                                      std::span<const std::uint8_t>, bool);                                    \
  template AttentionMap extract_attention_map<T>(const EncoderOutput<T>&);

OPENUS_INSTANTIATE(float)
OPENUS_INSTANTIATE(double)
#undef OPENUS_INSTANTIATE

}  // namespace openus
