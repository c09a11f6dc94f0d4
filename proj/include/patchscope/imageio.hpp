#pragma once

// Image decode/encode. Lossless interchange is PPM (P6) / PGM (P5);
// baseline JPEG comes from the codec in jpeg.hpp. Format is inferred from
// the file extension.

#include <cstdint>
#include <string>
#include <vector>

#include "patchscope/common.hpp"

namespace patchscope {

// Distinct IO failure classes (spec'd error surface).
struct UnsupportedFormatError : IoError {
  using IoError::IoError;
};
struct TruncatedFileError : IoError {
  using IoError::IoError;
};
struct HeaderMismatchError : IoError {
  using IoError::IoError;
};

struct Image {
  int width = 0;
  int height = 0;
  int channels = 3;                   // interleaved RGB
  std::vector<std::uint8_t> samples;  // row-major, width*height*channels
  std::string format;                 // "ppm", "pgm", "jpeg"

  std::size_t index(int y, int x, int c) const {
    return (static_cast<std::size_t>(y) * static_cast<std::size_t>(width) +
            static_cast<std::size_t>(x)) *
               static_cast<std::size_t>(channels) +
           static_cast<std::size_t>(c);
  }
  std::uint8_t at(int y, int x, int c) const { return samples[index(y, x, c)]; }
};

Image make_image(int width, int height);

Image read_image(const std::string& path);
void write_image(const std::string& path, const Image& img);

Image read_ppm(const std::string& path);
void write_ppm(const std::string& path, const Image& img);

// PGM round-trips single-channel payloads (heatmaps); read_image expands a
// PGM to three identical channels to keep the Image invariant channels==3.
std::vector<std::uint8_t> read_pgm(const std::string& path, int& width,
                                   int& height);
void write_pgm(const std::string& path, int width, int height,
               const std::vector<std::uint8_t>& gray);

double psnr(const Image& a, const Image& b);

}  // namespace patchscope
