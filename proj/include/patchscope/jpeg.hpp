#pragma once

// Self-contained baseline sequential JFIF codec: RGB<->YCbCr, 4:2:0
// subsampling, 8x8 float DCT, IJG quality scaling of the standard
// quantization tables, standard Huffman tables. Progressive and arithmetic
// streams are rejected with UnsupportedJpegError.

#include <array>
#include <cstdint>
#include <vector>

#include "patchscope/common.hpp"
#include "patchscope/imageio.hpp"

namespace patchscope {

struct NotJpegError : DataError {
  using DataError::DataError;
};
struct UnsupportedJpegError : DataError {
  using DataError::DataError;
};
struct CorruptJpegError : DataError {
  using DataError::DataError;
};

std::vector<std::uint8_t> jpeg_encode(const Image& img, int quality);
Image jpeg_decode(const std::vector<std::uint8_t>& bytes);

// IJG scaling: scale = 5000/q for q < 50 else 200 - 2q; entries
// floor((base*scale + 50)/100) clamped to [1, 255]. Row-major 8x8.
std::array<int, 64> jpeg_quant_table_luma(int quality);
std::array<int, 64> jpeg_quant_table_chroma(int quality);

}  // namespace patchscope
