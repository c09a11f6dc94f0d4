#include "patchscope/imageio.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>

#include "patchscope/jpeg.hpp"

namespace patchscope {

Image make_image(int width, int height) {
  if (width < 1 || height < 1) {
    throw ConfigError("image dimensions must be >= 1");
  }
  Image img;
  img.width = width;
  img.height = height;
  img.channels = 3;
  img.samples.assign(
      static_cast<std::size_t>(width) * static_cast<std::size_t>(height) * 3,
      0);
  return img;
}

namespace {

std::string lower_ext(const std::string& path) {
  const auto dot = path.find_last_of('.');
  if (dot == std::string::npos) return "";
  std::string ext = path.substr(dot + 1);
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  return ext;
}

// Reads one whitespace/comment-delimited token from a PNM header.
std::string pnm_token(std::istream& in, const std::string& path) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  if (tok.empty()) throw TruncatedFileError("truncated PNM header: " + path);
  return tok;
}

int pnm_int(std::istream& in, const std::string& path) {
  const std::string tok = pnm_token(in, path);
  try {
    return std::stoi(tok);
  } catch (const std::exception&) {
    throw HeaderMismatchError("bad PNM header field '" + tok + "' in " + path);
  }
}

std::vector<std::uint8_t> read_pnm_payload(std::istream& in, std::size_t n,
                                           const std::string& path) {
  std::vector<std::uint8_t> data(n);
  in.read(reinterpret_cast<char*>(data.data()),
          static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) {
    throw TruncatedFileError("PNM payload shorter than header promises: " +
                             path);
  }
  return data;
}

}  // namespace

Image read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image: " + path);
  const std::string magic = pnm_token(in, path);
  if (magic != "P6") {
    throw HeaderMismatchError("expected P6 magic in " + path + ", got '" +
                              magic + "'");
  }
  const int w = pnm_int(in, path);
  const int h = pnm_int(in, path);
  const int maxval = pnm_int(in, path);
  if (w < 1 || h < 1 || maxval != 255) {
    throw HeaderMismatchError("unsupported PPM geometry/maxval in " + path);
  }
  Image img = make_image(w, h);
  img.format = "ppm";
  img.samples = read_pnm_payload(
      in, static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 3, path);
  return img;
}

void write_ppm(const std::string& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write image: " + path);
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.samples.data()),
            static_cast<std::streamsize>(img.samples.size()));
  if (!out) throw IoError("short write: " + path);
}

std::vector<std::uint8_t> read_pgm(const std::string& path, int& width,
                                   int& height) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image: " + path);
  const std::string magic = pnm_token(in, path);
  if (magic != "P5") {
    throw HeaderMismatchError("expected P5 magic in " + path + ", got '" +
                              magic + "'");
  }
  width = pnm_int(in, path);
  height = pnm_int(in, path);
  const int maxval = pnm_int(in, path);
  if (width < 1 || height < 1 || maxval != 255) {
    throw HeaderMismatchError("unsupported PGM geometry/maxval in " + path);
  }
  return read_pnm_payload(
      in,
      static_cast<std::size_t>(width) * static_cast<std::size_t>(height),
      path);
}

void write_pgm(const std::string& path, int width, int height,
               const std::vector<std::uint8_t>& gray) {
  if (gray.size() != static_cast<std::size_t>(width) *
                         static_cast<std::size_t>(height)) {
    throw ConfigError("PGM payload size does not match dimensions");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write image: " + path);
  out << "P5\n" << width << " " << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(gray.data()),
            static_cast<std::streamsize>(gray.size()));
  if (!out) throw IoError("short write: " + path);
}

Image read_image(const std::string& path) {
  const std::string ext = lower_ext(path);
  if (ext == "ppm") return read_ppm(path);
  if (ext == "pgm") {
    int w = 0, h = 0;
    const auto gray = read_pgm(path, w, h);
    Image img = make_image(w, h);
    img.format = "pgm";
    for (std::size_t i = 0; i < gray.size(); ++i) {
      img.samples[i * 3 + 0] = gray[i];
      img.samples[i * 3 + 1] = gray[i];
      img.samples[i * 3 + 2] = gray[i];
    }
    return img;
  }
  if (ext == "jpg" || ext == "jpeg") {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open image: " + path);
    std::vector<std::uint8_t> bytes(
        (std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return jpeg_decode(bytes);
  }
  throw UnsupportedFormatError("unsupported image format '." + ext +
                               "': " + path);
}

void write_image(const std::string& path, const Image& img) {
  const std::string ext = lower_ext(path);
  if (ext == "ppm") {
    write_ppm(path, img);
    return;
  }
  if (ext == "pgm") {
    // Rec. 601 luma, rounded.
    std::vector<std::uint8_t> gray(
        static_cast<std::size_t>(img.width) *
        static_cast<std::size_t>(img.height));
    for (std::size_t i = 0; i < gray.size(); ++i) {
      const double y = 0.299 * img.samples[i * 3 + 0] +
                       0.587 * img.samples[i * 3 + 1] +
                       0.114 * img.samples[i * 3 + 2];
      gray[i] = static_cast<std::uint8_t>(std::lround(std::clamp(y, 0.0, 255.0)));
    }
    write_pgm(path, img.width, img.height, gray);
    return;
  }
  if (ext == "jpg" || ext == "jpeg") {
    const auto bytes = jpeg_encode(img, 90);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write image: " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write: " + path);
    return;
  }
  throw UnsupportedFormatError("unsupported image format '." + ext +
                               "': " + path);
}

double psnr(const Image& a, const Image& b) {
  if (a.width != b.width || a.height != b.height || a.channels != b.channels) {
    throw ConfigError("psnr: image dimensions differ");
  }
  double mse = 0.0;
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    const double d =
        static_cast<double>(a.samples[i]) - static_cast<double>(b.samples[i]);
    mse += d * d;
  }
  mse /= static_cast<double>(a.samples.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(255.0 * 255.0 / mse);
}

}  // namespace patchscope
