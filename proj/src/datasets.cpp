#include "patchscope/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "patchscope/jpeg.hpp"

namespace fs = std::filesystem;

namespace patchscope {

std::string to_string(Label l) { return l == Label::real ? "real" : "fake"; }

std::string to_string(Split s) {
  switch (s) {
    case Split::train:
      return "train";
    case Split::val:
      return "val";
    default:
      return "test";
  }
}

Label label_from_string(const std::string& s) {
  if (s == "real") return Label::real;
  if (s == "fake") return Label::fake;
  throw DataError("label outside {real, fake}: '" + s + "'");
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw DataError("unknown split: '" + s + "'");
}

Representation representation_from_string(const std::string& s) {
  if (s == "raw") return Representation::raw;
  if (s == "gradient") return Representation::gradient;
  throw ConfigError("unknown representation: '" + s + "'");
}

std::string PreprocessConfig::describe() const {
  std::ostringstream os;
  os << "resize=" << resize_to << " crop=" << crop << " repr="
     << (representation == Representation::raw ? "raw" : "gradient");
  return os.str();
}

std::vector<std::int64_t> DatasetManifest::view(Split s) const {
  auto v = view_optional(s);
  if (v.empty()) {
    throw DataError("manifest has no records in split '" + to_string(s) + "'");
  }
  return v;
}

std::vector<std::int64_t> DatasetManifest::view_optional(Split s) const {
  std::vector<std::int64_t> v;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].split == s) v.push_back(static_cast<std::int64_t>(i));
  }
  return v;
}

std::string DatasetManifest::resolve(const ManifestRecord& r) const {
  if (base_dir.empty()) return r.path;
  return (fs::path(base_dir) / r.path).string();
}

void DatasetManifest::validate() const {
  std::set<std::string> seen;
  for (const auto& r : records) {
    if (!seen.insert(r.path).second) {
      throw DataError("duplicate path in manifest: " + r.path);
    }
  }
}

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest: " + path);
  DatasetManifest m;
  m.base_dir = fs::path(path).parent_path().string();
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const auto t1 = line.find('\t');
    const auto t2 = t1 == std::string::npos ? std::string::npos
                                            : line.find('\t', t1 + 1);
    if (t1 == std::string::npos || t2 == std::string::npos) {
      throw DataError("manifest line " + std::to_string(lineno) +
                      " is not path<TAB>label<TAB>split: " + line);
    }
    ManifestRecord r;
    r.path = line.substr(0, t1);
    r.label = label_from_string(line.substr(t1 + 1, t2 - t1 - 1));
    r.split = split_from_string(line.substr(t2 + 1));
    m.records.push_back(std::move(r));
  }
  m.validate();
  return m;
}

void save_manifest(const std::string& path, const DatasetManifest& m) {
  m.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write manifest: " + path);
  for (const auto& r : m.records) {
    out << r.path << '\t' << to_string(r.label) << '\t' << to_string(r.split)
        << '\n';
  }
  if (!out) throw IoError("short write: " + path);
}

DatasetManifest manifest_from_tree(const std::string& dir,
                                   std::optional<Split> single_split,
                                   double train_frac, double val_frac,
                                   std::uint64_t seed) {
  DatasetManifest m;
  m.base_dir = dir;
  for (const Label label : {Label::real, Label::fake}) {
    const fs::path sub = fs::path(dir) / to_string(label);
    if (!fs::is_directory(sub)) {
      throw IoError("expected subdirectory " + sub.string() +
                    " (WildRF-style tree with real/ and fake/)");
    }
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(sub)) {
      if (!e.is_regular_file()) continue;
      std::string ext = e.path().extension().string();
      std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
      if (ext == ".ppm" || ext == ".pgm" || ext == ".jpg" || ext == ".jpeg") {
        files.push_back((fs::path(to_string(label)) / e.path().filename())
                            .generic_string());
      }
    }
    std::sort(files.begin(), files.end());
    std::vector<std::int64_t> order(files.size());
    for (std::size_t i = 0; i < files.size(); ++i) {
      order[i] = static_cast<std::int64_t>(i);
    }
    if (!single_split) {
      Rng rng(derive_seed(seed, label == Label::real ? 0 : 1));
      shuffle_indices(order, rng);
    }
    const auto n = static_cast<std::int64_t>(files.size());
    const auto n_train = static_cast<std::int64_t>(std::llround(train_frac * n));
    const auto n_val = static_cast<std::int64_t>(std::llround(val_frac * n));
    for (std::int64_t i = 0; i < n; ++i) {
      ManifestRecord r;
      r.path = files[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
      r.label = label;
      if (single_split) {
        r.split = *single_split;
      } else {
        r.split = i < n_train            ? Split::train
                  : i < n_train + n_val ? Split::val
                                        : Split::test;
      }
      m.records.push_back(std::move(r));
    }
  }
  std::sort(m.records.begin(), m.records.end(),
            [](const ManifestRecord& a, const ManifestRecord& b) {
              return a.path < b.path;
            });
  m.validate();
  return m;
}

// --------------------------------------------------------------- synthetic

namespace {

// Multi-octave value noise in [0,1]: random lattices upsampled bilinearly,
// halving amplitude per octave.
std::vector<double> value_noise(int size, Rng& rng, int octaves = 4,
                                int base_cells = 4) {
  std::vector<double> acc(static_cast<std::size_t>(size) * size, 0.0);
  double amp = 1.0, norm = 0.0;
  for (int o = 0; o < octaves; ++o) {
    const int cells = base_cells << o;
    std::vector<double> lattice(static_cast<std::size_t>(cells) * cells);
    for (auto& v : lattice) v = rng.next_unit();
    const auto up = resize_bilinear_plane<double>(lattice, cells, cells, size,
                                                  size);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += amp * up[i];
    norm += amp;
    amp *= 0.5;
  }
  for (auto& v : acc) v /= norm;
  return acc;
}

// Smooth colored content in sample units [30, 225].
std::array<std::vector<double>, 3> synth_content(int size, Rng& rng) {
  const auto shared = value_noise(size, rng);
  std::array<std::vector<double>, 3> planes;
  for (int c = 0; c < 3; ++c) {
    const auto tint = value_noise(size, rng, 3, 4);
    auto& pl = planes[static_cast<std::size_t>(c)];
    pl.resize(shared.size());
    for (std::size_t i = 0; i < pl.size(); ++i) {
      const double v = 0.8 * shared[i] + 0.2 * tint[i];
      pl[i] = 30.0 + v * 195.0;
    }
  }
  return planes;
}

Image planes_to_image(const std::array<std::vector<double>, 3>& planes,
                      int size) {
  Image img = make_image(size, size);
  img.format = "ppm";
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      for (int c = 0; c < 3; ++c) {
        const double v = planes[static_cast<std::size_t>(c)]
                               [static_cast<std::size_t>(y) * size + x];
        img.samples[img.index(y, x, c)] = static_cast<std::uint8_t>(
            std::clamp(std::lround(v), 0l, 255l));
      }
    }
  }
  return img;
}

Image synth_one(Label label, int size, Rng& rng, const SynthConfig& cfg) {
  auto planes = synth_content(size, rng);
  if (cfg.mode == SynthMode::jpeg_confound) {
    Image img = planes_to_image(planes, size);
    if (label == Label::real) {
      // The compression round trip is the only real/fake difference.
      img = jpeg_decode(jpeg_encode(img, cfg.confound_quality));
      img.format = "ppm";
    }
    return img;
  }
  if (label == Label::real) {
    // Per-pixel Gaussian sensor noise.
    for (auto& pl : planes) {
      for (auto& v : pl) v += cfg.sensor_sigma * rng.next_normal();
    }
  } else {
    // Down/upsample round trip plants the local smoothness artifact.
    const int half = (size + 1) / 2;
    for (auto& pl : planes) {
      auto down = resize_bilinear_plane<double>(pl, size, size, half, half);
      pl = resize_bilinear_plane<double>(down, half, half, size, size);
    }
  }
  return planes_to_image(planes, size);
}

}  // namespace

DatasetManifest synth_generate(const SynthConfig& cfg,
                               const std::string& out_dir,
                               std::string* warning) {
  if (cfg.image_size < 8) throw ConfigError("synth image size too small");
  fs::create_directories(fs::path(out_dir) / "images");
  DatasetManifest m;
  m.base_dir = out_dir;
  std::string warn;
  std::uint64_t image_index = 0;
  const std::pair<Split, int> split_counts[] = {
      {Split::train, cfg.train_per_class},
      {Split::val, cfg.val_per_class},
      {Split::test, cfg.test_per_class},
  };
  for (const Label label : {Label::real, Label::fake}) {
    int total = 0;
    for (const auto& [split, count] : split_counts) {
      for (int i = 0; i < count; ++i) {
        Rng rng(derive_seed(cfg.seed, image_index));
        const Image img = synth_one(label, cfg.image_size, rng, cfg);
        char name[64];
        std::snprintf(name, sizeof(name), "images/%s_%s_%04d.ppm",
                      to_string(label).c_str(), to_string(split).c_str(), i);
        write_ppm((fs::path(out_dir) / name).string(), img);
        m.records.push_back({name, label, split});
        ++image_index;
        ++total;
      }
    }
    if (total == 0) {
      warn += "warning: no " + to_string(label) + " images requested\n";
    }
  }
  if (warning) *warning = warn;
  save_manifest((fs::path(out_dir) / "manifest.tsv").string(), m);
  return m;
}

DatasetManifest synth_generate(int n_real, int n_fake, int image_size,
                               std::uint64_t seed, const std::string& out_dir,
                               std::string* warning) {
  if (image_size < 8) throw ConfigError("synth image size too small");
  fs::create_directories(fs::path(out_dir) / "images");
  DatasetManifest m;
  m.base_dir = out_dir;
  SynthConfig cfg;
  cfg.image_size = image_size;
  cfg.seed = seed;
  std::string warn;
  std::uint64_t image_index = 0;
  for (const auto& [label, count] :
       {std::pair{Label::real, n_real}, std::pair{Label::fake, n_fake}}) {
    for (int i = 0; i < count; ++i) {
      Rng rng(derive_seed(seed, image_index));
      const Image img = synth_one(label, image_size, rng, cfg);
      char name[64];
      std::snprintf(name, sizeof(name), "images/%s_train_%04d.ppm",
                    to_string(label).c_str(), i);
      write_ppm((fs::path(out_dir) / name).string(), img);
      m.records.push_back({name, label, Split::train});
      ++image_index;
    }
    if (count == 0) {
      warn += "warning: no " + to_string(label) + " images requested\n";
    }
  }
  if (warning) *warning = warn;
  save_manifest((fs::path(out_dir) / "manifest.tsv").string(), m);
  return m;
}

double mean_abs_laplacian(const Image& img) {
  if (img.width < 3 || img.height < 3) {
    throw ConfigError("mean_abs_laplacian needs at least 3x3 images");
  }
  auto luma = [&](int y, int x) {
    return 0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) +
           0.114 * img.at(y, x, 2);
  };
  double acc = 0.0;
  std::int64_t n = 0;
  for (int y = 1; y + 1 < img.height; ++y) {
    for (int x = 1; x + 1 < img.width; ++x) {
      const double lap = 4.0 * luma(y, x) - luma(y - 1, x) - luma(y + 1, x) -
                         luma(y, x - 1) - luma(y, x + 1);
      acc += std::abs(lap);
      ++n;
    }
  }
  return acc / static_cast<double>(n);
}

}  // namespace patchscope
