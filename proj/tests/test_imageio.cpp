#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "patchscope/common.hpp"
#include "patchscope/datasets.hpp"
#include "patchscope/imageio.hpp"
#include "patchscope/jpeg.hpp"

using namespace patchscope;
namespace fs = std::filesystem;

namespace {

fs::path tmp_dir() {
  const auto dir = fs::temp_directory_path() / "patchscope_imageio_tests";
  fs::create_directories(dir);
  return dir;
}

Image random_image(int w, int h, std::uint64_t seed) {
  Image img = make_image(w, h);
  Rng rng(seed);
  for (auto& s : img.samples) {
    s = static_cast<std::uint8_t>(rng.next_index(256));
  }
  return img;
}

// Smooth photographic stand-in: multi-octave value noise, mildly colored,
// free of per-pixel sensor noise (which no 4:2:0 codec can carry).
Image photo_image(int size, std::uint64_t seed) {
  SynthConfig cfg;
  cfg.image_size = size;
  cfg.seed = seed;
  cfg.mode = SynthMode::jpeg_confound;  // fake class = clean content
  const auto dir = tmp_dir() / ("photo_" + std::to_string(seed));
  cfg.train_per_class = 1;
  std::string warning;
  const DatasetManifest m = synth_generate(cfg, dir.string(), &warning);
  for (const auto& r : m.records) {
    if (r.label == Label::fake) return read_image(m.resolve(r));
  }
  throw DataError("no clean content image generated");
}

}  // namespace

TEST_CASE("P6 images round-trip bit-exactly") {
  const auto path = (tmp_dir() / "two_by_one.ppm").string();
  Image img = make_image(2, 1);
  img.samples = {10, 20, 30, 200, 100, 0};
  write_ppm(path, img);
  const Image back = read_ppm(path);
  CHECK(back.width == 2);
  CHECK(back.height == 1);
  CHECK(back.samples == img.samples);
}

TEST_CASE("PGM heatmap write then read returns identical samples") {
  const auto path = (tmp_dir() / "map.pgm").string();
  const std::vector<std::uint8_t> gray = {0, 85, 170, 255, 17, 253};
  write_pgm(path, 3, 2, gray);
  int w = 0, h = 0;
  const auto back = read_pgm(path, w, h);
  CHECK(w == 3);
  CHECK(h == 2);
  CHECK(back == gray);
}

TEST_CASE("image io failure classes are distinct") {
  const auto dir = tmp_dir();
  // unsupported format
  CHECK_THROWS_AS(read_image((dir / "x.png").string()), UnsupportedFormatError);
  // truncated payload
  {
    std::ofstream f((dir / "trunc.ppm").string(), std::ios::binary);
    f << "P6\n4 4\n255\n";
    f << "short";
  }
  CHECK_THROWS_AS(read_ppm((dir / "trunc.ppm").string()), TruncatedFileError);
  // header mismatch (wrong magic)
  {
    std::ofstream f((dir / "bad.ppm").string(), std::ios::binary);
    f << "P5\n2 2\n255\nxxxx";
  }
  CHECK_THROWS_AS(read_ppm((dir / "bad.ppm").string()), HeaderMismatchError);
}

TEST_CASE("bad SOI marker raises a not-a-JPEG error") {
  std::vector<std::uint8_t> bogus = {0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a};
  try {
    jpeg_decode(bogus);
    FAIL("expected NotJpegError");
  } catch (const NotJpegError& e) {
    CHECK(std::string(e.what()).find("not a JPEG") != std::string::npos);
  }
}

TEST_CASE("progressive and arithmetic frames are unsupported features") {
  // SOI + minimal SOF2 header
  std::vector<std::uint8_t> prog = {0xff, 0xd8, 0xff, 0xc2, 0x00, 0x0b,
                                    0x08, 0x00, 0x08, 0x00, 0x08, 0x01,
                                    0x01, 0x11, 0x00};
  CHECK_THROWS_AS(jpeg_decode(prog), UnsupportedJpegError);
  std::vector<std::uint8_t> arith = prog;
  arith[3] = 0xc9;  // arithmetic sequential
  CHECK_THROWS_AS(jpeg_decode(arith), UnsupportedJpegError);
}

TEST_CASE("uniform mid-gray survives the codec exactly at any quality") {
  for (const int q : {1, 37, 80, 100}) {
    Image img = make_image(20, 12);
    std::fill(img.samples.begin(), img.samples.end(),
              static_cast<std::uint8_t>(128));
    const Image back = jpeg_decode(jpeg_encode(img, q));
    CHECK(back.width == img.width);
    CHECK(back.height == img.height);
    CHECK(back.samples == img.samples);
  }
}

TEST_CASE("quality 100 scales the luminance table to all ones") {
  const auto t = jpeg_quant_table_luma(100);
  for (const int v : t) CHECK(v == 1);
  // and quality 50 reproduces the base table exactly (scale = 100)
  const auto t50 = jpeg_quant_table_luma(50);
  CHECK(t50[0] == 16);
  CHECK(t50[63] == 99);
  // tables never scale below 1
  for (const int v : jpeg_quant_table_luma(1)) CHECK(v >= 1);
}

TEST_CASE("codec round-trips decodably for qualities across [1,100]") {
  for (const int q : {1, 7, 25, 50, 75, 93, 100}) {
    // odd sizes exercise subsampling and MCU padding
    const Image img = random_image(17, 13, 1000 + static_cast<std::uint64_t>(q));
    const auto bytes = jpeg_encode(img, q);
    const Image back = jpeg_decode(bytes);
    CHECK(back.width == img.width);
    CHECK(back.height == img.height);
  }
  // 1x1 image
  const Image one = random_image(1, 1, 5);
  const Image back = jpeg_decode(jpeg_encode(one, 90));
  CHECK(back.width == 1);
  CHECK(back.height == 1);
}

TEST_CASE("PSNR at quality 100 exceeds 45 dB on a natural test image") {
  const Image img = photo_image(128, 77);
  const Image back = jpeg_decode(jpeg_encode(img, 100));
  CHECK(psnr(img, back) >= 45.0);
}

TEST_CASE("PSNR is non-decreasing in quality (0.1 dB slack)") {
  const Image img = photo_image(128, 78);
  double prev = -1e9;
  for (int q = 30; q <= 100; q += 10) {
    const Image back = jpeg_decode(jpeg_encode(img, q));
    const double p = psnr(img, back);
    CHECK(p >= prev - 0.1);
    prev = std::max(prev, p);
  }
}

TEST_CASE("read_image infers formats from extensions") {
  const auto dir = tmp_dir();
  const Image img = random_image(9, 6, 3);
  write_image((dir / "a.ppm").string(), img);
  CHECK(read_image((dir / "a.ppm").string()).samples == img.samples);
  // jpeg path goes through the codec
  write_image((dir / "a.jpg").string(), img);
  const Image jb = read_image((dir / "a.jpg").string());
  CHECK(jb.width == 9);
  CHECK(jb.height == 6);
  // pgm reads back as replicated gray channels
  write_image((dir / "a.pgm").string(), img);
  const Image gb = read_image((dir / "a.pgm").string());
  CHECK(gb.channels == 3);
  CHECK(gb.at(0, 0, 0) == gb.at(0, 0, 1));
}
