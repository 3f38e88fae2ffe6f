// SPDX-License-Identifier: Apache-2.0
//
// PGM corpus I/O, speckle phantoms, augmentation and multi-crop views.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace openus {

struct GrayImage {
  std::size_t height = 0, width = 0;
  std::vector<double> pixels;  // row-major, [0, 1]

  double at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }
};

enum class Source { corpus, synthetic };

struct Lesion {
  double cy = 0, cx = 0;  // center, pixels
  double ry = 0, rx = 0;  // semi-axes, pixels
  double angle = 0;       // radians
  double contrast = 0;    // signed; echogenicity is scaled by (1 + contrast)
  std::size_t y0 = 0, x0 = 0, y1 = 0, x1 = 0;  // inclusive bounding box
};

struct ImageRecord {
  std::string id;
  GrayImage image;
  Source source = Source::corpus;
  std::uint64_t seed = 0;
  std::vector<Lesion> lesions;

  int label() const { return lesions.empty() ? 0 : 1; }
};

class PgmError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Binary P5 with maxval 255.
GrayImage decode_pgm(const std::string& bytes);
std::string encode_pgm(const GrayImage& image);
GrayImage read_pgm(const std::filesystem::path& path);
/// Writes through a temporary file and a rename.
void write_pgm(const std::filesystem::path& path, const GrayImage& image);

struct CorpusError {
  std::string file;
  std::string message;
};

/// Every *.pgm in `dir`, sorted by file name. Bad files are skipped and
/// reported in `errors` (and on stderr).
std::vector<ImageRecord> load_corpus(const std::filesystem::path& dir, std::vector<CorpusError>* errors = nullptr);

struct SpecklePhantomSpec {
  std::size_t size = 64;
  std::size_t lesion_min = 0, lesion_max = 3;
  double lesion_free_fraction = 0.25;  // chance of a lesion-free image when lesion_min = 0
  double contrast_min = 0.5, contrast_max = 0.9;  // magnitude; sign picks hypo/hyper
  double radius_min = 5, radius_max = 12;          // semi-axis range, pixels
  double hyper_fraction = 0.5;
  double background = 0.3;
  double attenuation = 0.4;     // relative brightness loss from top to bottom
  double tissue_variation = 0.5;  // amplitude of the smooth random echogenicity field
  double speckle_shape = 0.8;   // 0: no speckle, 1: fully developed Rayleigh
  std::uint64_t seed = 0;
};

ImageRecord synth_speckle(const SpecklePhantomSpec& spec, const std::string& id);

/// Images seeded spec.seed + i, ids "synth_00000", ...
std::vector<ImageRecord> synth_corpus(const SpecklePhantomSpec& spec, std::size_t count);

/// "id seed lesion_count y0 x0 y1 x1 ..."
std::string manifest_line(const ImageRecord& record);
/// Reads lesion bounding boxes back; records keyed by id.
struct ManifestEntry {
  std::string id;
  std::uint64_t seed = 0;
  std::size_t lesion_count = 0;
  std::vector<Lesion> boxes;
};
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);

struct AugmentConfig {
  double p_flip = 0.5;
  double p_jitter = 0.8;
  double p_blur = 0.3;
  double p_gamma = 0.3;
  double scale_min = 0.7, scale_max = 1.3;
  double shift_min = -0.2, shift_max = 0.2;
  double sigma_min = 0.1, sigma_max = 1.0;
  double gamma_min = 0.7, gamma_max = 1.4;
};

struct AugmentRecord {
  bool flip = false;
  double scale = 1, shift = 0;  // v -> clamp(scale v + shift)
  double sigma = 0;             // 0: no blur
  double gamma = 1;
};

/// Samples parameters, then applies them.
GrayImage augment(const GrayImage& image, const AugmentConfig& config, std::mt19937_64& rng,
                  AugmentRecord* record = nullptr);
GrayImage apply_augment(const GrayImage& image, const AugmentRecord& record);

GrayImage flip_horizontal(const GrayImage& image);
GrayImage gaussian_blur(const GrayImage& image, double sigma);
/// Bilinear resample of the box [y0, y0+h) x [x0, x0+w) to out_h x out_w.
GrayImage resize_bilinear(const GrayImage& image, double y0, double x0, double h, double w, std::size_t out_h,
                          std::size_t out_w);
GrayImage resize_bilinear(const GrayImage& image, std::size_t out_h, std::size_t out_w);

struct CropBox {
  double y0 = 0, x0 = 0, h = 0, w = 0;
};

struct ViewRecord {
  CropBox crop;
  AugmentRecord augment;
  bool fallback = false;  // center crop after failed draws
};

struct ViewConfig {
  std::size_t global_views = 2, local_views = 8;
  std::size_t global_size = 64, local_size = 32;
  double global_scale_min = 0.4, global_scale_max = 1.0;
  double local_scale_min = 0.05, local_scale_max = 0.4;
  double aspect_min = 3.0 / 4.0, aspect_max = 4.0 / 3.0;
  AugmentConfig augment;
};

struct ViewBatch {
  std::vector<GrayImage> global_views;
  std::vector<GrayImage> local_views;
  std::vector<ViewRecord> global_records;
  std::vector<ViewRecord> local_records;
};

/// Random resized crop with area fraction in [scale_min, scale_max].
CropBox sample_crop(std::size_t height, std::size_t width, double scale_min, double scale_max, double aspect_min,
                    double aspect_max, std::mt19937_64& rng, bool* fallback = nullptr);

ViewBatch make_views(const GrayImage& image, const ViewConfig& config, std::mt19937_64& rng);

/// Stream for one image in one epoch, independent of worker scheduling.
std::mt19937_64 image_rng(std::uint64_t seed, std::uint64_t epoch, std::uint64_t index);

}  // namespace openus
