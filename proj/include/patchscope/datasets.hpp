#pragma once

// Manifest-driven dataset access, the resize/crop preprocessing pipeline,
// the gradient image representation, and the synthetic real/fake generator
// used for desk-scale verification.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "patchscope/imageio.hpp"
#include "patchscope/tensor.hpp"

namespace patchscope {

enum class Label { real = 0, fake = 1 };
enum class Split { train, val, test };

std::string to_string(Label l);
std::string to_string(Split s);
Label label_from_string(const std::string& s);
Split split_from_string(const std::string& s);

struct ManifestRecord {
  std::string path;  // relative to base_dir
  Label label = Label::real;
  Split split = Split::train;
};

// Text manifest: one record per line, `path<TAB>label<TAB>split`, UTF-8, LF.
struct DatasetManifest {
  std::string base_dir;
  std::vector<ManifestRecord> records;

  // Indices of one split, in manifest order. Throws DataError when the
  // requested split is empty.
  std::vector<std::int64_t> view(Split s) const;
  std::vector<std::int64_t> view_optional(Split s) const;  // may be empty
  std::string resolve(const ManifestRecord& r) const;

  void validate() const;  // unique paths, parseable fields
};

DatasetManifest load_manifest(const std::string& path);
void save_manifest(const std::string& path, const DatasetManifest& m);

// Scans a WildRF-style tree (real/ and fake/ subdirectories) and assigns
// splits either wholesale or by seeded shuffle over per-class fractions.
DatasetManifest manifest_from_tree(const std::string& dir,
                                   std::optional<Split> single_split,
                                   double train_frac, double val_frac,
                                   std::uint64_t seed);

// ------------------------------------------------------------ preprocess

enum class Representation { raw, gradient };

struct PreprocessConfig {
  int resize_to = 256;
  int crop = 224;  // random at train, center at eval
  Representation representation = Representation::raw;
  std::uint64_t seed = 1;

  void validate() const {
    if (crop > resize_to || crop < 1 || resize_to < 1) {
      throw ConfigError("preprocess: crop must satisfy 1 <= crop <= resize_to");
    }
  }
  std::string describe() const;
};

Representation representation_from_string(const std::string& s);

// Bilinear resample with half-pixel centers; same-size calls are identity.
template <typename T>
std::vector<T> resize_bilinear_plane(const std::vector<T>& src, int sw, int sh,
                                     int dw, int dh);

// u8 image -> [3, crop, crop] tensor in [0,1]: bilinear resize to
// resize_to, then random (train) or center (eval) crop, then the optional
// gradient representation.
template <typename T>
Tensor<T> preprocess_image(const Image& img, const PreprocessConfig& cfg,
                           bool random_crop, Rng& rng);

// Per channel: central-difference magnitude sqrt(dx^2+dy^2) with clamped
// edges; commutes with horizontal/vertical flips and ignores constant
// offsets. Accepts [3,H,W].
template <typename T>
Tensor<T> gradient_transform(const Tensor<T>& chw);

template <typename T>
struct LoadedBatch {
  Tensor<T> images;  // [B,3,crop,crop]
  std::vector<int> labels;
  std::vector<std::string> paths;
  std::vector<std::string> record_errors;  // per-record failures, with paths
};

// Loads the given manifest indices. Unreadable records are reported in
// record_errors and skipped; throws DataError only when every record fails.
template <typename T>
LoadedBatch<T> load_batch(const DatasetManifest& m,
                          const std::vector<std::int64_t>& indices,
                          const PreprocessConfig& cfg, bool random_crop,
                          Rng& rng);

// --------------------------------------------------------------- synthetic

enum class SynthMode {
  standard,      // real: noisy value-noise content; fake: 2x down/up resampled
  jpeg_confound  // identical clean content; real JPEG round-tripped
};

struct SynthConfig {
  int train_per_class = 0;
  int val_per_class = 0;
  int test_per_class = 0;
  int image_size = 224;
  std::uint64_t seed = 1;
  SynthMode mode = SynthMode::standard;
  int confound_quality = 75;  // jpeg_confound mode
  double sensor_sigma = 2.0;  // sample units, standard mode
};

// Writes PPM images plus manifest.tsv under out_dir and returns the
// manifest. Byte-identical output for a fixed config. A class with zero
// images yields a warning via *warning.
DatasetManifest synth_generate(const SynthConfig& cfg,
                               const std::string& out_dir,
                               std::string* warning = nullptr);

// Single-split convenience used by small experiments: n_real/n_fake train
// records of the standard mode.
DatasetManifest synth_generate(int n_real, int n_fake, int image_size,
                               std::uint64_t seed, const std::string& out_dir,
                               std::string* warning = nullptr);

// Mean |4c - up - down - left - right| over interior luma pixels; the
// smoothness statistic separating the two synthetic populations.
double mean_abs_laplacian(const Image& img);

// ------------------------------------------------------- template bodies

template <typename T>
std::vector<T> resize_bilinear_plane(const std::vector<T>& src, int sw, int sh,
                                     int dw, int dh) {
  std::vector<T> dst(static_cast<std::size_t>(dw) * dh);
  const double sx = static_cast<double>(sw) / dw;
  const double sy = static_cast<double>(sh) / dh;
  for (int y = 0; y < dh; ++y) {
    double fy = (y + 0.5) * sy - 0.5;
    fy = std::min(std::max(fy, 0.0), static_cast<double>(sh - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, sh - 1);
    const double wy = fy - y0;
    for (int x = 0; x < dw; ++x) {
      double fx = (x + 0.5) * sx - 0.5;
      fx = std::min(std::max(fx, 0.0), static_cast<double>(sw - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, sw - 1);
      const double wx = fx - x0;
      const double v00 = src[static_cast<std::size_t>(y0) * sw + x0];
      const double v01 = src[static_cast<std::size_t>(y0) * sw + x1];
      const double v10 = src[static_cast<std::size_t>(y1) * sw + x0];
      const double v11 = src[static_cast<std::size_t>(y1) * sw + x1];
      const double top = v00 + (v01 - v00) * wx;
      const double bot = v10 + (v11 - v10) * wx;
      dst[static_cast<std::size_t>(y) * dw + x] =
          static_cast<T>(top + (bot - top) * wy);
    }
  }
  return dst;
}

template <typename T>
Tensor<T> gradient_transform(const Tensor<T>& chw) {
  if (chw.rank() != 3 || chw.dim(0) != 3) {
    throw ConfigError("gradient_transform expects [3,H,W], got " +
                      shape_str(chw.shape()));
  }
  const std::int64_t H = chw.dim(1), W = chw.dim(2);
  std::vector<T> out(chw.vec().size());
  const T* in = chw.data();
  for (std::int64_t c = 0; c < 3; ++c) {
    const T* p = in + c * H * W;
    T* q = out.data() + c * H * W;
    for (std::int64_t y = 0; y < H; ++y) {
      const std::int64_t yu = y > 0 ? y - 1 : 0;
      const std::int64_t yd = y + 1 < H ? y + 1 : H - 1;
      for (std::int64_t x = 0; x < W; ++x) {
        const std::int64_t xl = x > 0 ? x - 1 : 0;
        const std::int64_t xr = x + 1 < W ? x + 1 : W - 1;
        const double dx = 0.5 * (static_cast<double>(p[y * W + xr]) -
                                 static_cast<double>(p[y * W + xl]));
        const double dy = 0.5 * (static_cast<double>(p[yd * W + x]) -
                                 static_cast<double>(p[yu * W + x]));
        q[y * W + x] = static_cast<T>(std::sqrt(dx * dx + dy * dy));
      }
    }
  }
  return Tensor<T>::from_vector(chw.shape(), std::move(out));
}

template <typename T>
Tensor<T> preprocess_image(const Image& img, const PreprocessConfig& cfg,
                           bool random_crop, Rng& rng) {
  cfg.validate();
  const int R = cfg.resize_to, C = cfg.crop;
  // u8 -> [0,1] planes
  std::vector<std::vector<T>> planes(3);
  for (int c = 0; c < 3; ++c) {
    auto& pl = planes[static_cast<std::size_t>(c)];
    pl.resize(static_cast<std::size_t>(img.width) * img.height);
    for (int y = 0; y < img.height; ++y) {
      for (int x = 0; x < img.width; ++x) {
        pl[static_cast<std::size_t>(y) * img.width + x] =
            static_cast<T>(img.at(y, x, c) / 255.0);
      }
    }
    pl = resize_bilinear_plane<T>(pl, img.width, img.height, R, R);
  }
  // Crop offsets are drawn even for center crops so the rng consumption per
  // record does not depend on crop mode.
  std::int64_t ox = 0, oy = 0;
  const std::int64_t span = R - C + 1;
  const std::int64_t rx = rng.next_index(span);
  const std::int64_t ry = rng.next_index(span);
  if (random_crop) {
    ox = rx;
    oy = ry;
  } else {
    ox = (R - C) / 2;
    oy = (R - C) / 2;
  }
  std::vector<T> out(static_cast<std::size_t>(3) * C * C);
  for (int c = 0; c < 3; ++c) {
    const auto& pl = planes[static_cast<std::size_t>(c)];
    for (int y = 0; y < C; ++y) {
      for (int x = 0; x < C; ++x) {
        out[static_cast<std::size_t>(c) * C * C +
            static_cast<std::size_t>(y) * C + x] =
            pl[static_cast<std::size_t>(oy + y) * R +
               static_cast<std::size_t>(ox + x)];
      }
    }
  }
  auto t = Tensor<T>::from_vector({3, C, C}, std::move(out));
  if (cfg.representation == Representation::gradient) {
    t = gradient_transform(t);
  }
  return t;
}

template <typename T>
LoadedBatch<T> load_batch(const DatasetManifest& m,
                          const std::vector<std::int64_t>& indices,
                          const PreprocessConfig& cfg, bool random_crop,
                          Rng& rng) {
  LoadedBatch<T> batch;
  std::vector<Tensor<T>> images;
  for (const std::int64_t i : indices) {
    const auto& rec = m.records[static_cast<std::size_t>(i)];
    try {
      const Image img = read_image(m.resolve(rec));
      images.push_back(preprocess_image<T>(img, cfg, random_crop, rng));
      batch.labels.push_back(rec.label == Label::fake ? 1 : 0);
      batch.paths.push_back(rec.path);
    } catch (const std::exception& e) {
      batch.record_errors.push_back(rec.path + ": " + e.what());
    }
  }
  if (images.empty()) {
    std::string msg = "all records in batch failed to load:";
    for (const auto& e : batch.record_errors) msg += "\n  " + e;
    throw DataError(msg);
  }
  const std::int64_t C = cfg.crop;
  const std::int64_t B = static_cast<std::int64_t>(images.size());
  std::vector<T> data(static_cast<std::size_t>(B * 3 * C * C));
  for (std::int64_t b = 0; b < B; ++b) {
    const auto& v = images[static_cast<std::size_t>(b)].vec();
    std::copy(v.begin(), v.end(), data.begin() + b * 3 * C * C);
  }
  batch.images = Tensor<T>::from_vector({B, 3, C, C}, std::move(data));
  return batch;
}

}  // namespace patchscope
