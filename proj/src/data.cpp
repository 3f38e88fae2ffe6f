// SPDX-License-Identifier: Apache-2.0
#include "openus/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numbers>
#include <sstream>

namespace openus {

namespace fs = std::filesystem;

// -- PGM ------------------------------------------------------------------

namespace {
std::size_t read_header_int(const std::string& s, std::size_t& pos) {
  for (;;) {
    while (pos < s.size() && std::isspace(static_cast<unsigned char>(s[pos]))) ++pos;
    if (pos < s.size() && s[pos] == '#') {
      while (pos < s.size() && s[pos] != '\n') ++pos;
      continue;
    }
    break;
  }
  if (pos >= s.size() || !std::isdigit(static_cast<unsigned char>(s[pos]))) throw PgmError("malformed header");
  std::size_t v = 0;
  while (pos < s.size() && std::isdigit(static_cast<unsigned char>(s[pos]))) {
    v = v * 10 + static_cast<std::size_t>(s[pos] - '0');
    if (v > (1u << 24)) throw PgmError("header value out of range");
    ++pos;
  }
  return v;
}
}  // namespace

GrayImage decode_pgm(const std::string& bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') throw PgmError("not a binary PGM (P5)");
  std::size_t pos = 2;
  GrayImage img;
  img.width = read_header_int(bytes, pos);
  img.height = read_header_int(bytes, pos);
  const std::size_t maxval = read_header_int(bytes, pos);
  if (img.width == 0 || img.height == 0) throw PgmError("zero image dimension");
  if (maxval != 255) throw PgmError("maxval " + std::to_string(maxval) + " is not 255");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) throw PgmError("malformed header");
  ++pos;
  const std::size_t n = img.width * img.height;
  if (bytes.size() - pos < n)
    throw PgmError("truncated payload: " + std::to_string(bytes.size() - pos) + " of " + std::to_string(n) + " bytes");
  img.pixels.resize(n);
  for (std::size_t i = 0; i < n; ++i) img.pixels[i] = static_cast<unsigned char>(bytes[pos + i]) / 255.0;
  return img;
}

std::string encode_pgm(const GrayImage& image) {
  std::string out = "P5\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  out.reserve(out.size() + image.pixels.size());
  for (double v : image.pixels) out.push_back(static_cast<char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  return out;
}

GrayImage read_pgm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PgmError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_pgm(ss.str());
}

void write_pgm(const fs::path& path, const GrayImage& image) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw PgmError("cannot write " + tmp.string());
    const std::string bytes = encode_pgm(image);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw PgmError("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::vector<ImageRecord> load_corpus(const fs::path& dir, std::vector<CorpusError>* errors) {
  if (!fs::is_directory(dir)) throw std::invalid_argument("corpus directory not found: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".pgm") files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  std::vector<ImageRecord> records;
  for (const fs::path& f : files) {
    try {
      ImageRecord r;
      r.id = f.stem().string();
      r.image = read_pgm(f);
      r.source = Source::corpus;
      records.push_back(std::move(r));
    } catch (const PgmError& e) {
      std::cerr << "skipping " << f.filename().string() << ": " << e.what() << "\n";
      if (errors) errors->push_back({f.filename().string(), e.what()});
    }
  }
  return records;
}

// -- phantoms -------------------------------------------------------------

ImageRecord synth_speckle(const SpecklePhantomSpec& spec, const std::string& id) {
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::size_t n = spec.size;
  ImageRecord rec;
  rec.id = id;
  rec.source = Source::synthetic;
  rec.seed = spec.seed;

  std::size_t count = 0;
  const bool free = spec.lesion_min == 0 && unit(rng) < spec.lesion_free_fraction;
  if (!free && spec.lesion_max > 0) {
    std::uniform_int_distribution<std::size_t> pick(std::max<std::size_t>(1, spec.lesion_min), spec.lesion_max);
    count = pick(rng);
  }
  for (std::size_t k = 0; k < count; ++k) {
    Lesion l;
    l.ry = spec.radius_min + unit(rng) * (spec.radius_max - spec.radius_min);
    l.rx = spec.radius_min + unit(rng) * (spec.radius_max - spec.radius_min);
    l.angle = unit(rng) * std::numbers::pi;
    const double reach = std::max(l.ry, l.rx);
    const double lo = std::min(reach, n / 2.0), hi = std::max(lo, static_cast<double>(n) - reach);
    l.cy = lo + unit(rng) * (hi - lo);
    l.cx = lo + unit(rng) * (hi - lo);
    const double mag = spec.contrast_min + unit(rng) * (spec.contrast_max - spec.contrast_min);
    l.contrast = unit(rng) < spec.hyper_fraction ? mag : -std::min(mag, 0.95);
    const double ca = std::cos(l.angle), sa = std::sin(l.angle);
    const double ey = std::sqrt(l.ry * l.ry * ca * ca + l.rx * l.rx * sa * sa);
    const double ex = std::sqrt(l.rx * l.rx * ca * ca + l.ry * l.ry * sa * sa);
    auto clampi = [&](double v) { return static_cast<std::size_t>(std::clamp(v, 0.0, static_cast<double>(n - 1))); };
    l.y0 = clampi(std::floor(l.cy - ey));
    l.y1 = clampi(std::ceil(l.cy + ey));
    l.x0 = clampi(std::floor(l.cx - ex));
    l.x1 = clampi(std::ceil(l.cx + ex));
    rec.lesions.push_back(l);
  }

  // Correlated Rayleigh speckle: magnitude of a smoothed complex Gaussian field.
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> re(n * n), im(n * n);
  for (std::size_t i = 0; i < n * n; ++i) re[i] = gauss(rng), im[i] = gauss(rng);
  auto smooth = [&](const std::vector<double>& f) {
    std::vector<double> g(n * n, 0.0);
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) {
        double acc = 0;
        int cnt = 0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const long yy = static_cast<long>(y) + dy, xx = static_cast<long>(x) + dx;
            if (yy < 0 || xx < 0 || yy >= static_cast<long>(n) || xx >= static_cast<long>(n)) continue;
            acc += f[static_cast<std::size_t>(yy) * n + static_cast<std::size_t>(xx)];
            ++cnt;
          }
        g[y * n + x] = acc / cnt;
      }
    return g;
  };
  re = smooth(re);
  im = smooth(im);
  std::vector<double> speckle(n * n);
  double mean = 0;
  for (std::size_t i = 0; i < n * n; ++i) mean += speckle[i] = std::hypot(re[i], im[i]);
  mean /= static_cast<double>(n * n);

  // Tissue echogenicity: bilinear upsample of a coarse random grid.
  constexpr std::size_t kCells = 4;
  std::vector<double> coarse((kCells + 1) * (kCells + 1));
  for (double& v : coarse) v = 2 * unit(rng) - 1;
  auto tissue = [&](std::size_t y, std::size_t x) {
    const double fy = static_cast<double>(y) * kCells / static_cast<double>(n - 1);
    const double fx = static_cast<double>(x) * kCells / static_cast<double>(n - 1);
    const std::size_t y0 = std::min<std::size_t>(static_cast<std::size_t>(fy), kCells - 1);
    const std::size_t x0 = std::min<std::size_t>(static_cast<std::size_t>(fx), kCells - 1);
    const double ty = fy - static_cast<double>(y0), tx = fx - static_cast<double>(x0);
    auto at = [&](std::size_t r, std::size_t c) { return coarse[r * (kCells + 1) + c]; };
    return (1 - ty) * ((1 - tx) * at(y0, x0) + tx * at(y0, x0 + 1)) +
           ty * ((1 - tx) * at(y0 + 1, x0) + tx * at(y0 + 1, x0 + 1));
  };

  rec.image.height = rec.image.width = n;
  rec.image.pixels.resize(n * n);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      double echo = spec.background * (1 - spec.attenuation * static_cast<double>(y) / static_cast<double>(n - 1)) *
                    (1 + spec.tissue_variation * tissue(y, x));
      for (const Lesion& l : rec.lesions) {
        const double dy = static_cast<double>(y) - l.cy, dx = static_cast<double>(x) - l.cx;
        const double u = dy * std::cos(l.angle) + dx * std::sin(l.angle);
        const double v = -dy * std::sin(l.angle) + dx * std::cos(l.angle);
        if ((u * u) / (l.ry * l.ry) + (v * v) / (l.rx * l.rx) <= 1) echo *= 1 + l.contrast;
      }
      const double noise = (1 - spec.speckle_shape) + spec.speckle_shape * speckle[y * n + x] / mean;
      rec.image.pixels[y * n + x] = std::clamp(echo * noise, 0.0, 1.0);
    }
  return rec;
}

std::vector<ImageRecord> synth_corpus(const SpecklePhantomSpec& spec, std::size_t count) {
  std::vector<ImageRecord> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    SpecklePhantomSpec s = spec;
    s.seed = spec.seed + i;
    char id[32];
    std::snprintf(id, sizeof id, "synth_%05zu", i);
    out.push_back(synth_speckle(s, id));
  }
  return out;
}

std::string manifest_line(const ImageRecord& r) {
  std::string line = r.id + " " + std::to_string(r.seed) + " " + std::to_string(r.lesions.size());
  for (const Lesion& l : r.lesions)
    line += " " + std::to_string(l.y0) + " " + std::to_string(l.x0) + " " + std::to_string(l.y1) + " " +
            std::to_string(l.x1);
  return line;
}

std::vector<ManifestEntry> read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest " + path.string());
  std::vector<ManifestEntry> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    ManifestEntry e;
    if (!(ss >> e.id >> e.seed >> e.lesion_count))
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": malformed manifest line");
    for (std::size_t k = 0; k < e.lesion_count; ++k) {
      Lesion l;
      if (!(ss >> l.y0 >> l.x0 >> l.y1 >> l.x1))
        throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": missing bounding box");
      e.boxes.push_back(l);
    }
    out.push_back(std::move(e));
  }
  return out;
}

// -- augmentation ---------------------------------------------------------

GrayImage flip_horizontal(const GrayImage& image) {
  GrayImage out = image;
  for (std::size_t y = 0; y < image.height; ++y)
    for (std::size_t x = 0; x < image.width; ++x)
      out.pixels[y * image.width + x] = image.pixels[y * image.width + (image.width - 1 - x)];
  return out;
}

GrayImage gaussian_blur(const GrayImage& image, double sigma) {
  if (!(sigma > 0)) return image;
  const auto radius = static_cast<long>(std::ceil(2 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double total = 0;
  for (long i = -radius; i <= radius; ++i)
    total += k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * double(i * i) / (sigma * sigma));
  for (double& v : k) v /= total;
  const long h = static_cast<long>(image.height), w = static_cast<long>(image.width);
  auto at = [](const std::vector<double>& p, long y, long x, long width) {
    return p[static_cast<std::size_t>(y * width + x)];
  };
  std::vector<double> tmp(image.pixels.size()), out(image.pixels.size());
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      double acc = 0;
      for (long i = -radius; i <= radius; ++i)
        acc += k[static_cast<std::size_t>(i + radius)] * at(image.pixels, y, std::clamp(x + i, 0L, w - 1), w);
      tmp[static_cast<std::size_t>(y * w + x)] = acc;
    }
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      double acc = 0;
      for (long i = -radius; i <= radius; ++i)
        acc += k[static_cast<std::size_t>(i + radius)] * at(tmp, std::clamp(y + i, 0L, h - 1), x, w);
      out[static_cast<std::size_t>(y * w + x)] = acc;
    }
  GrayImage r = image;
  r.pixels = std::move(out);
  return r;
}

GrayImage apply_augment(const GrayImage& image, const AugmentRecord& rec) {
  GrayImage out = rec.flip ? flip_horizontal(image) : image;
  if (rec.scale != 1 || rec.shift != 0)
    for (double& v : out.pixels) v = std::clamp(rec.scale * v + rec.shift, 0.0, 1.0);
  if (rec.sigma > 0) out = gaussian_blur(out, rec.sigma);
  if (rec.gamma != 1)
    for (double& v : out.pixels) v = std::pow(std::clamp(v, 0.0, 1.0), rec.gamma);
  for (double& v : out.pixels) v = std::clamp(v, 0.0, 1.0);
  return out;
}

GrayImage augment(const GrayImage& image, const AugmentConfig& c, std::mt19937_64& rng, AugmentRecord* record) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto range = [&](double lo, double hi) { return lo + unit(rng) * (hi - lo); };
  AugmentRecord rec;
  rec.flip = unit(rng) < c.p_flip;
  if (unit(rng) < c.p_jitter) {
    rec.scale = range(c.scale_min, c.scale_max);
    rec.shift = range(c.shift_min, c.shift_max);
  }
  if (unit(rng) < c.p_blur) rec.sigma = range(c.sigma_min, c.sigma_max);
  if (unit(rng) < c.p_gamma) rec.gamma = range(c.gamma_min, c.gamma_max);
  if (record) *record = rec;
  return apply_augment(image, rec);
}

// -- views ----------------------------------------------------------------

GrayImage resize_bilinear(const GrayImage& image, double y0, double x0, double h, double w, std::size_t out_h,
                          std::size_t out_w) {
  GrayImage out;
  out.height = out_h;
  out.width = out_w;
  out.pixels.resize(out_h * out_w);
  const double maxy = static_cast<double>(image.height - 1), maxx = static_cast<double>(image.width - 1);
  for (std::size_t i = 0; i < out_h; ++i) {
    const double sy = std::clamp(y0 + (static_cast<double>(i) + 0.5) * h / static_cast<double>(out_h) - 0.5, 0.0, maxy);
    const auto iy = static_cast<std::size_t>(sy);
    const std::size_t iy1 = std::min(iy + 1, image.height - 1);
    const double fy = sy - static_cast<double>(iy);
    for (std::size_t j = 0; j < out_w; ++j) {
      const double sx =
          std::clamp(x0 + (static_cast<double>(j) + 0.5) * w / static_cast<double>(out_w) - 0.5, 0.0, maxx);
      const auto ix = static_cast<std::size_t>(sx);
      const std::size_t ix1 = std::min(ix + 1, image.width - 1);
      const double fx = sx - static_cast<double>(ix);
      const double top = image.at(iy, ix) * (1 - fx) + image.at(iy, ix1) * fx;
      const double bot = image.at(iy1, ix) * (1 - fx) + image.at(iy1, ix1) * fx;
      out.pixels[i * out_w + j] = top * (1 - fy) + bot * fy;
    }
  }
  return out;
}

GrayImage resize_bilinear(const GrayImage& image, std::size_t out_h, std::size_t out_w) {
  if (image.height == out_h && image.width == out_w) return image;
  return resize_bilinear(image, 0, 0, static_cast<double>(image.height), static_cast<double>(image.width), out_h,
                         out_w);
}

CropBox sample_crop(std::size_t height, std::size_t width, double scale_min, double scale_max, double aspect_min,
                    double aspect_max, std::mt19937_64& rng, bool* fallback) {
  const double H = static_cast<double>(height), W = static_cast<double>(width), area = H * W;
  std::uniform_real_distribution<double> scale(scale_min, scale_max);
  std::uniform_real_distribution<double> log_aspect(std::log(aspect_min), std::log(aspect_max));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double a = scale(rng) * area;
    const double r = std::exp(log_aspect(rng));
    const double w = std::sqrt(a * r), h = std::sqrt(a / r);
    if (!(w >= 1 && h >= 1 && w <= W && h <= H)) continue;
    if (fallback) *fallback = false;
    return {unit(rng) * (H - h), unit(rng) * (W - w), h, w};
  }
  if (fallback) *fallback = true;
  const double side = std::min({std::sqrt(0.5 * (scale_min + scale_max) * area), H, W});
  return {(H - side) / 2, (W - side) / 2, side, side};
}

ViewBatch make_views(const GrayImage& image, const ViewConfig& c, std::mt19937_64& rng) {
  if (image.height == 0 || image.width == 0) throw std::invalid_argument("make_views: empty image");
  ViewBatch b;
  auto one = [&](double smin, double smax, std::size_t size, std::vector<GrayImage>& views,
                 std::vector<ViewRecord>& records) {
    ViewRecord rec;
    rec.crop = sample_crop(image.height, image.width, smin, smax, c.aspect_min, c.aspect_max, rng, &rec.fallback);
    const GrayImage crop = resize_bilinear(image, rec.crop.y0, rec.crop.x0, rec.crop.h, rec.crop.w, size, size);
    views.push_back(augment(crop, c.augment, rng, &rec.augment));
    records.push_back(rec);
  };
  for (std::size_t g = 0; g < c.global_views; ++g)
    one(c.global_scale_min, c.global_scale_max, c.global_size, b.global_views, b.global_records);
  for (std::size_t l = 0; l < c.local_views; ++l)
    one(c.local_scale_min, c.local_scale_max, c.local_size, b.local_views, b.local_records);
  return b;
}

std::mt19937_64 image_rng(std::uint64_t seed, std::uint64_t epoch, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(index), 0x6f75u};
  return std::mt19937_64(seq);
}

}  // namespace openus
