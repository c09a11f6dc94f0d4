#include "patchscope/jpeg.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>

namespace patchscope {

namespace {

// ----------------------------------------------------------- constants

// ITU T.81 Annex K example quantization tables, row-major.
constexpr int kBaseLuma[64] = {
    16, 11, 10, 16, 24,  40,  51,  61,  //
    12, 12, 14, 19, 26,  58,  60,  55,  //
    14, 13, 16, 24, 40,  57,  69,  56,  //
    14, 17, 22, 29, 51,  87,  80,  62,  //
    18, 22, 37, 56, 68,  109, 103, 77,  //
    24, 35, 55, 64, 81,  104, 113, 92,  //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99};

constexpr int kBaseChroma[64] = {
    17, 18, 24, 47, 99, 99, 99, 99,  //
    18, 21, 26, 66, 99, 99, 99, 99,  //
    24, 26, 56, 99, 99, 99, 99, 99,  //
    47, 66, 99, 99, 99, 99, 99, 99,  //
    99, 99, 99, 99, 99, 99, 99, 99,  //
    99, 99, 99, 99, 99, 99, 99, 99,  //
    99, 99, 99, 99, 99, 99, 99, 99,  //
    99, 99, 99, 99, 99, 99, 99, 99};

// Zigzag position -> row-major index.
constexpr int kZigzag[64] = {
    0,  1,  8,  16, 9,  2,  3,  10, 17, 24, 32, 25, 18, 11, 4,  5,
    12, 19, 26, 33, 40, 48, 41, 34, 27, 20, 13, 6,  7,  14, 21, 28,
    35, 42, 49, 56, 57, 50, 43, 36, 29, 22, 15, 23, 30, 37, 44, 51,
    58, 59, 52, 45, 38, 31, 39, 46, 53, 60, 61, 54, 47, 55, 62, 63};

// Standard Huffman tables (T.81 Annex K): code-length counts for lengths
// 1..16 followed by the symbol order.
constexpr std::uint8_t kDcLumaBits[16] = {0, 1, 5, 1, 1, 1, 1, 1,
                                          1, 0, 0, 0, 0, 0, 0, 0};
constexpr std::uint8_t kDcLumaVals[12] = {0, 1, 2, 3, 4,  5,
                                          6, 7, 8, 9, 10, 11};
constexpr std::uint8_t kDcChromaBits[16] = {0, 3, 1, 1, 1, 1, 1, 1,
                                            1, 1, 1, 0, 0, 0, 0, 0};
constexpr std::uint8_t kDcChromaVals[12] = {0, 1, 2, 3, 4,  5,
                                            6, 7, 8, 9, 10, 11};

constexpr std::uint8_t kAcLumaBits[16] = {0, 2, 1, 3, 3, 2, 4, 3,
                                          5, 5, 4, 4, 0, 0, 1, 0x7d};
constexpr std::uint8_t kAcLumaVals[162] = {
    0x01, 0x02, 0x03, 0x00, 0x04, 0x11, 0x05, 0x12, 0x21, 0x31, 0x41, 0x06,
    0x13, 0x51, 0x61, 0x07, 0x22, 0x71, 0x14, 0x32, 0x81, 0x91, 0xa1, 0x08,
    0x23, 0x42, 0xb1, 0xc1, 0x15, 0x52, 0xd1, 0xf0, 0x24, 0x33, 0x62, 0x72,
    0x82, 0x09, 0x0a, 0x16, 0x17, 0x18, 0x19, 0x1a, 0x25, 0x26, 0x27, 0x28,
    0x29, 0x2a, 0x34, 0x35, 0x36, 0x37, 0x38, 0x39, 0x3a, 0x43, 0x44, 0x45,
    0x46, 0x47, 0x48, 0x49, 0x4a, 0x53, 0x54, 0x55, 0x56, 0x57, 0x58, 0x59,
    0x5a, 0x63, 0x64, 0x65, 0x66, 0x67, 0x68, 0x69, 0x6a, 0x73, 0x74, 0x75,
    0x76, 0x77, 0x78, 0x79, 0x7a, 0x83, 0x84, 0x85, 0x86, 0x87, 0x88, 0x89,
    0x8a, 0x92, 0x93, 0x94, 0x95, 0x96, 0x97, 0x98, 0x99, 0x9a, 0xa2, 0xa3,
    0xa4, 0xa5, 0xa6, 0xa7, 0xa8, 0xa9, 0xaa, 0xb2, 0xb3, 0xb4, 0xb5, 0xb6,
    0xb7, 0xb8, 0xb9, 0xba, 0xc2, 0xc3, 0xc4, 0xc5, 0xc6, 0xc7, 0xc8, 0xc9,
    0xca, 0xd2, 0xd3, 0xd4, 0xd5, 0xd6, 0xd7, 0xd8, 0xd9, 0xda, 0xe1, 0xe2,
    0xe3, 0xe4, 0xe5, 0xe6, 0xe7, 0xe8, 0xe9, 0xea, 0xf1, 0xf2, 0xf3, 0xf4,
    0xf5, 0xf6, 0xf7, 0xf8, 0xf9, 0xfa};

constexpr std::uint8_t kAcChromaBits[16] = {0, 2, 1, 2, 4, 4, 3, 4,
                                            7, 5, 4, 4, 0, 1, 2, 0x77};
constexpr std::uint8_t kAcChromaVals[162] = {
    0x00, 0x01, 0x02, 0x03, 0x11, 0x04, 0x05, 0x21, 0x31, 0x06, 0x12, 0x41,
    0x51, 0x07, 0x61, 0x71, 0x13, 0x22, 0x32, 0x81, 0x08, 0x14, 0x42, 0x91,
    0xa1, 0xb1, 0xc1, 0x09, 0x23, 0x33, 0x52, 0xf0, 0x15, 0x62, 0x72, 0xd1,
    0x0a, 0x16, 0x24, 0x34, 0xe1, 0x25, 0xf1, 0x17, 0x18, 0x19, 0x1a, 0x26,
    0x27, 0x28, 0x29, 0x2a, 0x35, 0x36, 0x37, 0x38, 0x39, 0x3a, 0x43, 0x44,
    0x45, 0x46, 0x47, 0x48, 0x49, 0x4a, 0x53, 0x54, 0x55, 0x56, 0x57, 0x58,
    0x59, 0x5a, 0x63, 0x64, 0x65, 0x66, 0x67, 0x68, 0x69, 0x6a, 0x73, 0x74,
    0x75, 0x76, 0x77, 0x78, 0x79, 0x7a, 0x82, 0x83, 0x84, 0x85, 0x86, 0x87,
    0x88, 0x89, 0x8a, 0x92, 0x93, 0x94, 0x95, 0x96, 0x97, 0x98, 0x99, 0x9a,
    0xa2, 0xa3, 0xa4, 0xa5, 0xa6, 0xa7, 0xa8, 0xa9, 0xaa, 0xb2, 0xb3, 0xb4,
    0xb5, 0xb6, 0xb7, 0xb8, 0xb9, 0xba, 0xc2, 0xc3, 0xc4, 0xc5, 0xc6, 0xc7,
    0xc8, 0xc9, 0xca, 0xd2, 0xd3, 0xd4, 0xd5, 0xd6, 0xd7, 0xd8, 0xd9, 0xda,
    0xe2, 0xe3, 0xe4, 0xe5, 0xe6, 0xe7, 0xe8, 0xe9, 0xea, 0xf2, 0xf3, 0xf4,
    0xf5, 0xf6, 0xf7, 0xf8, 0xf9, 0xfa};

std::array<int, 64> scale_table(const int* base, int quality) {
  if (quality < 1 || quality > 100) {
    throw ConfigError("JPEG quality must be in [1,100], got " +
                      std::to_string(quality));
  }
  const int scale = quality < 50 ? 5000 / quality : 200 - 2 * quality;
  std::array<int, 64> out{};
  for (int i = 0; i < 64; ++i) {
    out[static_cast<std::size_t>(i)] =
        std::clamp((base[i] * scale + 50) / 100, 1, 255);
  }
  return out;
}

// ----------------------------------------------------------- float DCT

struct DctTables {
  double cosv[8][8];  // cosv[u][x] = cos((2x+1)u*pi/16)
  double cnorm[8];    // C(u): 1/sqrt(2) for u=0 else 1
  DctTables() {
    for (int u = 0; u < 8; ++u) {
      for (int x = 0; x < 8; ++x) {
        cosv[u][x] = std::cos((2 * x + 1) * u * std::numbers::pi / 16.0);
      }
      cnorm[u] = u == 0 ? 1.0 / std::sqrt(2.0) : 1.0;
    }
  }
};

const DctTables& dct_tables() {
  static const DctTables t;
  return t;
}

void fdct8x8(const double in[64], double out[64]) {
  const auto& t = dct_tables();
  double tmp[64];
  for (int y = 0; y < 8; ++y) {
    for (int u = 0; u < 8; ++u) {
      double acc = 0.0;
      for (int x = 0; x < 8; ++x) acc += in[y * 8 + x] * t.cosv[u][x];
      tmp[y * 8 + u] = acc;
    }
  }
  for (int u = 0; u < 8; ++u) {
    for (int v = 0; v < 8; ++v) {
      double acc = 0.0;
      for (int y = 0; y < 8; ++y) acc += tmp[y * 8 + u] * t.cosv[v][y];
      out[v * 8 + u] = 0.25 * t.cnorm[u] * t.cnorm[v] * acc;
    }
  }
}

void idct8x8(const double in[64], double out[64]) {
  const auto& t = dct_tables();
  double tmp[64];
  for (int v = 0; v < 8; ++v) {
    for (int x = 0; x < 8; ++x) {
      double acc = 0.0;
      for (int u = 0; u < 8; ++u) {
        acc += t.cnorm[u] * in[v * 8 + u] * t.cosv[u][x];
      }
      tmp[v * 8 + x] = acc;
    }
  }
  for (int x = 0; x < 8; ++x) {
    for (int y = 0; y < 8; ++y) {
      double acc = 0.0;
      for (int v = 0; v < 8; ++v) {
        acc += t.cnorm[v] * tmp[v * 8 + x] * t.cosv[v][y];
      }
      out[y * 8 + x] = 0.25 * acc;
    }
  }
}

// ----------------------------------------------------------- bit streams

struct BitWriter {
  std::vector<std::uint8_t>& out;
  std::uint32_t bits = 0;
  int nbits = 0;

  explicit BitWriter(std::vector<std::uint8_t>& o) : out(o) {}

  void put(std::uint32_t code, int n) {
    bits = (bits << n) | (code & ((1u << n) - 1));
    nbits += n;
    while (nbits >= 8) {
      const std::uint8_t b =
          static_cast<std::uint8_t>((bits >> (nbits - 8)) & 0xff);
      out.push_back(b);
      if (b == 0xff) out.push_back(0x00);  // byte stuffing
      nbits -= 8;
    }
  }

  void flush() {
    if (nbits > 0) {
      const int pad = 8 - nbits;
      const std::uint8_t b = static_cast<std::uint8_t>(
          ((bits << pad) | ((1u << pad) - 1)) & 0xff);
      out.push_back(b);
      if (b == 0xff) out.push_back(0x00);
      nbits = 0;
      bits = 0;
    }
  }
};

struct BitReader {
  const std::vector<std::uint8_t>& data;
  std::size_t pos;
  std::uint32_t buf = 0;
  int nbits = 0;
  int pending_marker = -1;  // marker code encountered inside entropy data

  BitReader(const std::vector<std::uint8_t>& d, std::size_t p)
      : data(d), pos(p) {}

  int next_bit() {
    if (nbits == 0) {
      if (pending_marker >= 0 || pos >= data.size()) {
        // Past the end of entropy data: feed zero bits (padding semantics).
        return 0;
      }
      std::uint8_t b = data[pos++];
      if (b == 0xff) {
        if (pos >= data.size()) {
          throw CorruptJpegError("truncated entropy-coded segment");
        }
        const std::uint8_t m = data[pos];
        if (m == 0x00) {
          ++pos;  // stuffed 0xff
        } else {
          pending_marker = m;
          return 0;
        }
      }
      buf = b;
      nbits = 8;
    }
    --nbits;
    return static_cast<int>((buf >> nbits) & 1u);
  }

  int read_bits(int n) {
    int v = 0;
    for (int i = 0; i < n; ++i) v = (v << 1) | next_bit();
    return v;
  }

  // Byte-aligns and consumes an expected RST marker.
  void consume_rst(int expected_index) {
    nbits = 0;
    if (pending_marker < 0) {
      // Marker not yet seen; scan forward for it.
      while (pos + 1 < data.size()) {
        if (data[pos] == 0xff && data[pos + 1] != 0x00) {
          pending_marker = data[pos + 1];
          pos += 2;
          break;
        }
        ++pos;
      }
    } else {
      ++pos;  // skip the marker byte itself (0xff already consumed)
    }
    const int expect = 0xd0 + (expected_index & 7);
    if (pending_marker != expect) {
      throw CorruptJpegError("missing restart marker in entropy data");
    }
    pending_marker = -1;
  }
};

// ----------------------------------------------------------- Huffman

struct HuffEncoder {
  std::uint16_t code[256] = {};
  std::uint8_t length[256] = {};

  HuffEncoder(const std::uint8_t* bits, const std::uint8_t* vals, int nvals) {
    int k = 0;
    std::uint16_t c = 0;
    for (int l = 1; l <= 16; ++l) {
      for (int i = 0; i < bits[l - 1]; ++i) {
        if (k >= nvals) throw ConfigError("bad Huffman specification");
        code[vals[k]] = c++;
        length[vals[k]] = static_cast<std::uint8_t>(l);
        ++k;
      }
      c = static_cast<std::uint16_t>(c << 1);
    }
  }
};

struct HuffDecoder {
  int mincode[17] = {};
  int maxcode[17] = {};
  int valptr[17] = {};
  std::vector<std::uint8_t> vals;
  bool ready = false;

  void build(const std::uint8_t* bits, const std::uint8_t* v, int nvals) {
    vals.assign(v, v + nvals);
    int code = 0, k = 0;
    for (int l = 1; l <= 16; ++l) {
      if (bits[l - 1] == 0) {
        maxcode[l] = -1;
      } else {
        valptr[l] = k;
        mincode[l] = code;
        k += bits[l - 1];
        code += bits[l - 1];
        maxcode[l] = code - 1;
      }
      code <<= 1;
    }
    ready = true;
  }

  int decode(BitReader& br) const {
    int code = 0;
    for (int l = 1; l <= 16; ++l) {
      code = (code << 1) | br.next_bit();
      if (maxcode[l] >= 0 && code <= maxcode[l]) {
        return vals[static_cast<std::size_t>(valptr[l] + code - mincode[l])];
      }
    }
    throw CorruptJpegError("invalid Huffman code in entropy data");
  }
};

int bit_category(int v) {
  int a = v < 0 ? -v : v;
  int n = 0;
  while (a) {
    a >>= 1;
    ++n;
  }
  return n;
}

// ----------------------------------------------------------- encoder

struct Plane {
  int w = 0, h = 0;
  std::vector<double> v;
  double at_clamped(int y, int x) const {
    y = std::clamp(y, 0, h - 1);
    x = std::clamp(x, 0, w - 1);
    return v[static_cast<std::size_t>(y) * static_cast<std::size_t>(w) +
             static_cast<std::size_t>(x)];
  }
};

void append_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
}

void append_marker(std::vector<std::uint8_t>& out, std::uint8_t m) {
  out.push_back(0xff);
  out.push_back(m);
}

// Quantizes one spatial block and Huffman-codes it; returns the new DC value.
int encode_block(BitWriter& bw, const Plane& plane, int by, int bx,
                 const std::array<int, 64>& qtab, const HuffEncoder& dc,
                 const HuffEncoder& ac, int prev_dc) {
  double block[64];
  for (int y = 0; y < 8; ++y) {
    for (int x = 0; x < 8; ++x) {
      block[y * 8 + x] = plane.at_clamped(by + y, bx + x) - 128.0;
    }
  }
  double freq[64];
  fdct8x8(block, freq);
  int quant[64];
  for (int i = 0; i < 64; ++i) {
    quant[i] = static_cast<int>(
        std::llround(freq[kZigzag[i]] / qtab[static_cast<std::size_t>(kZigzag[i])]));
  }
  // DC difference
  const int diff = quant[0] - prev_dc;
  const int dsize = bit_category(diff);
  bw.put(dc.code[dsize], dc.length[dsize]);
  if (dsize > 0) {
    int bits = diff;
    if (diff < 0) bits = diff + (1 << dsize) - 1;
    bw.put(static_cast<std::uint32_t>(bits), dsize);
  }
  // AC run-length coding
  int run = 0;
  for (int i = 1; i < 64; ++i) {
    if (quant[i] == 0) {
      ++run;
      continue;
    }
    while (run > 15) {
      bw.put(ac.code[0xf0], ac.length[0xf0]);  // ZRL
      run -= 16;
    }
    const int asize = bit_category(quant[i]);
    const int sym = (run << 4) | asize;
    bw.put(ac.code[sym], ac.length[sym]);
    int bits = quant[i];
    if (quant[i] < 0) bits = quant[i] + (1 << asize) - 1;
    bw.put(static_cast<std::uint32_t>(bits), asize);
    run = 0;
  }
  if (run > 0) {
    bw.put(ac.code[0x00], ac.length[0x00]);  // EOB
  }
  return quant[0];
}

}  // namespace

std::array<int, 64> jpeg_quant_table_luma(int quality) {
  return scale_table(kBaseLuma, quality);
}

std::array<int, 64> jpeg_quant_table_chroma(int quality) {
  return scale_table(kBaseChroma, quality);
}

std::vector<std::uint8_t> jpeg_encode(const Image& img, int quality) {
  if (img.channels != 3) throw ConfigError("jpeg_encode expects RGB images");
  if (img.width < 1 || img.height < 1) {
    throw ConfigError("jpeg_encode: empty image");
  }
  const auto qluma = jpeg_quant_table_luma(quality);
  const auto qchroma = jpeg_quant_table_chroma(quality);

  const int w = img.width, h = img.height;
  Plane Y{w, h, std::vector<double>(static_cast<std::size_t>(w) * h)};
  Plane Cb = Y, Cr = Y;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double r = img.at(y, x, 0), g = img.at(y, x, 1), b = img.at(y, x, 2);
      const std::size_t i =
          static_cast<std::size_t>(y) * static_cast<std::size_t>(w) +
          static_cast<std::size_t>(x);
      Y.v[i] = 0.299 * r + 0.587 * g + 0.114 * b;
      Cb.v[i] = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0;
      Cr.v[i] = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0;
    }
  }
  // 4:2:0 chroma: mean of each 2x2 (edges replicate).
  const int cw = (w + 1) / 2, ch = (h + 1) / 2;
  Plane sCb{cw, ch, std::vector<double>(static_cast<std::size_t>(cw) * ch)};
  Plane sCr = sCb;
  for (int y = 0; y < ch; ++y) {
    for (int x = 0; x < cw; ++x) {
      double cb = 0.0, cr = 0.0;
      for (int dy = 0; dy < 2; ++dy) {
        for (int dx = 0; dx < 2; ++dx) {
          cb += Cb.at_clamped(2 * y + dy, 2 * x + dx);
          cr += Cr.at_clamped(2 * y + dy, 2 * x + dx);
        }
      }
      const std::size_t i =
          static_cast<std::size_t>(y) * static_cast<std::size_t>(cw) +
          static_cast<std::size_t>(x);
      sCb.v[i] = cb / 4.0;
      sCr.v[i] = cr / 4.0;
    }
  }

  std::vector<std::uint8_t> out;
  append_marker(out, 0xd8);  // SOI
  // APP0 / JFIF 1.01
  append_marker(out, 0xe0);
  append_u16(out, 16);
  const char jfif[5] = {'J', 'F', 'I', 'F', '\0'};
  out.insert(out.end(), jfif, jfif + 5);
  out.push_back(1);
  out.push_back(1);
  out.push_back(0);
  append_u16(out, 1);
  append_u16(out, 1);
  out.push_back(0);
  out.push_back(0);
  // DQT: both tables, 8-bit precision, zigzag order
  append_marker(out, 0xdb);
  append_u16(out, 2 + 2 * 65);
  out.push_back(0x00);
  for (int i = 0; i < 64; ++i) {
    out.push_back(static_cast<std::uint8_t>(qluma[static_cast<std::size_t>(kZigzag[i])]));
  }
  out.push_back(0x01);
  for (int i = 0; i < 64; ++i) {
    out.push_back(static_cast<std::uint8_t>(qchroma[static_cast<std::size_t>(kZigzag[i])]));
  }
  // SOF0: baseline, 8-bit, 3 components, Y 2x2, Cb/Cr 1x1
  append_marker(out, 0xc0);
  append_u16(out, 8 + 3 * 3);
  out.push_back(8);
  append_u16(out, static_cast<std::uint16_t>(h));
  append_u16(out, static_cast<std::uint16_t>(w));
  out.push_back(3);
  out.push_back(1);
  out.push_back(0x22);
  out.push_back(0);
  out.push_back(2);
  out.push_back(0x11);
  out.push_back(1);
  out.push_back(3);
  out.push_back(0x11);
  out.push_back(1);
  // DHT: all four standard tables in one segment
  append_marker(out, 0xc4);
  append_u16(out, static_cast<std::uint16_t>(2 + 4 * 17 + 12 + 12 + 162 + 162));
  auto emit_huff = [&out](std::uint8_t cls_id, const std::uint8_t* bits,
                          const std::uint8_t* vals, int n) {
    out.push_back(cls_id);
    out.insert(out.end(), bits, bits + 16);
    out.insert(out.end(), vals, vals + n);
  };
  emit_huff(0x00, kDcLumaBits, kDcLumaVals, 12);
  emit_huff(0x10, kAcLumaBits, kAcLumaVals, 162);
  emit_huff(0x01, kDcChromaBits, kDcChromaVals, 12);
  emit_huff(0x11, kAcChromaBits, kAcChromaVals, 162);
  // SOS
  append_marker(out, 0xda);
  append_u16(out, 6 + 2 * 3);
  out.push_back(3);
  out.push_back(1);
  out.push_back(0x00);
  out.push_back(2);
  out.push_back(0x11);
  out.push_back(3);
  out.push_back(0x11);
  out.push_back(0);
  out.push_back(63);
  out.push_back(0);

  const HuffEncoder dcl(kDcLumaBits, kDcLumaVals, 12);
  const HuffEncoder acl(kAcLumaBits, kAcLumaVals, 162);
  const HuffEncoder dcc(kDcChromaBits, kDcChromaVals, 12);
  const HuffEncoder acc(kAcChromaBits, kAcChromaVals, 162);

  BitWriter bw(out);
  const int mcux = (w + 15) / 16, mcuy = (h + 15) / 16;
  int dcY = 0, dcCb = 0, dcCr = 0;
  for (int my = 0; my < mcuy; ++my) {
    for (int mx = 0; mx < mcux; ++mx) {
      for (int sub = 0; sub < 4; ++sub) {
        const int by = my * 16 + (sub / 2) * 8;
        const int bx = mx * 16 + (sub % 2) * 8;
        dcY = encode_block(bw, Y, by, bx, qluma, dcl, acl, dcY);
      }
      dcCb = encode_block(bw, sCb, my * 8, mx * 8, qchroma, dcc, acc, dcCb);
      dcCr = encode_block(bw, sCr, my * 8, mx * 8, qchroma, dcc, acc, dcCr);
    }
  }
  bw.flush();
  append_marker(out, 0xd9);  // EOI
  return out;
}

// ----------------------------------------------------------- decoder

namespace {

struct Component {
  int id = 0;
  int hs = 1, vs = 1;  // sampling factors
  int tq = 0;          // quant table id
  int td = 0, ta = 0;  // huffman table ids
  int bw = 0, bh = 0;  // block grid covering the MCU-padded plane
  std::vector<double> plane;
  int dc_pred = 0;
};

struct DecoderState {
  int width = 0, height = 0;
  std::vector<Component> comps;
  std::array<int, 64> qtab[4] = {};
  bool have_q[4] = {false, false, false, false};
  HuffDecoder dc[4], ac[4];
  int restart_interval = 0;
  int max_h = 1, max_v = 1;
};

std::uint16_t read_u16(const std::vector<std::uint8_t>& d, std::size_t& p) {
  if (p + 2 > d.size()) throw CorruptJpegError("truncated JPEG segment");
  const std::uint16_t v =
      static_cast<std::uint16_t>((d[p] << 8) | d[p + 1]);
  p += 2;
  return v;
}

void decode_scan(const std::vector<std::uint8_t>& data, std::size_t pos,
                 DecoderState& st) {
  BitReader br(data, pos);
  const int mcux =
      (st.width + 8 * st.max_h - 1) / (8 * st.max_h);
  const int mcuy =
      (st.height + 8 * st.max_v - 1) / (8 * st.max_v);
  for (auto& c : st.comps) {
    c.bw = mcux * c.hs;
    c.bh = mcuy * c.vs;
    c.plane.assign(static_cast<std::size_t>(c.bw) * c.bh * 64, 0.0);
    c.dc_pred = 0;
  }
  int mcu_count = 0, rst_index = 0;
  for (int my = 0; my < mcuy; ++my) {
    for (int mx = 0; mx < mcux; ++mx) {
      if (st.restart_interval > 0 && mcu_count > 0 &&
          mcu_count % st.restart_interval == 0) {
        br.consume_rst(rst_index++);
        for (auto& c : st.comps) c.dc_pred = 0;
      }
      for (auto& c : st.comps) {
        const HuffDecoder& hdc = st.dc[c.td];
        const HuffDecoder& hac = st.ac[c.ta];
        if (!hdc.ready || !hac.ready) {
          throw CorruptJpegError("scan references undefined Huffman table");
        }
        if (!st.have_q[c.tq]) {
          throw CorruptJpegError("scan references undefined quant table");
        }
        const auto& q = st.qtab[c.tq];
        for (int sv = 0; sv < c.vs; ++sv) {
          for (int sh = 0; sh < c.hs; ++sh) {
            int zz[64] = {};
            const int dsize = hdc.decode(br);
            if (dsize > 0) {
              int v = br.read_bits(dsize);
              if (v < (1 << (dsize - 1))) v += -(1 << dsize) + 1;
              c.dc_pred += v;
            }
            zz[0] = c.dc_pred;
            for (int i = 1; i < 64;) {
              const int rs = hac.decode(br);
              const int run = rs >> 4, size = rs & 0x0f;
              if (size == 0) {
                if (run == 15) {
                  i += 16;  // ZRL
                  continue;
                }
                break;  // EOB
              }
              i += run;
              if (i > 63) throw CorruptJpegError("AC run past block end");
              int v = br.read_bits(size);
              if (v < (1 << (size - 1))) v += -(1 << size) + 1;
              zz[i++] = v;
            }
            double freq[64];
            for (int i = 0; i < 64; ++i) freq[i] = 0.0;
            for (int i = 0; i < 64; ++i) {
              freq[kZigzag[i]] =
                  static_cast<double>(zz[i]) *
                  static_cast<double>(q[static_cast<std::size_t>(kZigzag[i])]);
            }
            double pix[64];
            idct8x8(freq, pix);
            const int by = (my * c.vs + sv) * 8;
            const int bx = (mx * c.hs + sh) * 8;
            const int pw = c.bw * 8;
            for (int y = 0; y < 8; ++y) {
              for (int x = 0; x < 8; ++x) {
                c.plane[static_cast<std::size_t>(by + y) *
                            static_cast<std::size_t>(pw) +
                        static_cast<std::size_t>(bx + x)] = pix[y * 8 + x] + 128.0;
              }
            }
          }
        }
      }
      ++mcu_count;
    }
  }
}

std::uint8_t clamp_u8(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0l, 255l));
}

}  // namespace

Image jpeg_decode(const std::vector<std::uint8_t>& data) {
  if (data.size() < 2 || data[0] != 0xff || data[1] != 0xd8) {
    throw NotJpegError("not a JPEG: missing SOI marker");
  }
  DecoderState st;
  bool have_sof = false;
  std::size_t p = 2;
  while (true) {
    if (p + 2 > data.size()) throw CorruptJpegError("unexpected end of JPEG");
    if (data[p] != 0xff) throw CorruptJpegError("expected marker byte");
    std::uint8_t m = data[p + 1];
    p += 2;
    while (m == 0xff) {  // fill bytes
      if (p >= data.size()) throw CorruptJpegError("unexpected end of JPEG");
      m = data[p++];
    }
    if (m == 0xd9) {  // EOI before scan
      throw CorruptJpegError("JPEG has no image scan");
    }
    if (m == 0x01 || (m >= 0xd0 && m <= 0xd7)) continue;  // no payload
    const std::size_t seg_start = p;
    const std::uint16_t len = read_u16(data, p);
    if (len < 2 || seg_start + len > data.size()) {
      throw CorruptJpegError("truncated JPEG segment");
    }
    const std::size_t seg_end = seg_start + len;
    switch (m) {
      case 0xc0: {  // SOF0 baseline
        if (have_sof) throw CorruptJpegError("multiple SOF markers");
        have_sof = true;
        if (p >= seg_end) throw CorruptJpegError("short SOF");
        const int precision = data[p++];
        if (precision != 8) {
          throw UnsupportedJpegError("unsupported sample precision " +
                                     std::to_string(precision));
        }
        st.height = read_u16(data, p);
        st.width = read_u16(data, p);
        const int nc = data[p++];
        if (nc != 1 && nc != 3) {
          throw UnsupportedJpegError("unsupported component count " +
                                     std::to_string(nc));
        }
        if (st.width < 1 || st.height < 1) {
          throw CorruptJpegError("SOF declares empty image");
        }
        for (int i = 0; i < nc; ++i) {
          if (p + 3 > seg_end) throw CorruptJpegError("short SOF");
          Component c;
          c.id = data[p];
          c.hs = data[p + 1] >> 4;
          c.vs = data[p + 1] & 0x0f;
          c.tq = data[p + 2];
          p += 3;
          if (c.hs < 1 || c.hs > 2 || c.vs < 1 || c.vs > 2 || c.tq > 3) {
            throw UnsupportedJpegError("unsupported sampling factors");
          }
          st.comps.push_back(c);
          st.max_h = std::max(st.max_h, c.hs);
          st.max_v = std::max(st.max_v, c.vs);
        }
        break;
      }
      case 0xc1:
      case 0xc2:
      case 0xc3:
      case 0xc5:
      case 0xc6:
      case 0xc7:
      case 0xc9:
      case 0xca:
      case 0xcb:
      case 0xcd:
      case 0xce:
      case 0xcf:
        throw UnsupportedJpegError(
            m == 0xc2 ? "unsupported feature: progressive JPEG"
                      : (m >= 0xc9 && m <= 0xcb) || (m >= 0xcd && m <= 0xcf)
                            ? "unsupported feature: arithmetic-coded JPEG"
                            : "unsupported feature: non-baseline JPEG frame");
      case 0xdb: {  // DQT
        while (p < seg_end) {
          const int pq = data[p] >> 4, tq = data[p] & 0x0f;
          ++p;
          if (tq > 3) throw CorruptJpegError("bad quant table id");
          for (int i = 0; i < 64; ++i) {
            int v;
            if (pq == 0) {
              if (p >= seg_end) throw CorruptJpegError("short DQT");
              v = data[p++];
            } else {
              v = read_u16(data, p);
            }
            st.qtab[tq][static_cast<std::size_t>(kZigzag[i])] = v;
          }
          st.have_q[tq] = true;
        }
        break;
      }
      case 0xc4: {  // DHT
        while (p < seg_end) {
          const int tc = data[p] >> 4, th = data[p] & 0x0f;
          ++p;
          if (th > 3 || tc > 1) throw CorruptJpegError("bad Huffman table id");
          if (p + 16 > seg_end) throw CorruptJpegError("short DHT");
          std::uint8_t bits[16];
          int total = 0;
          for (int i = 0; i < 16; ++i) {
            bits[i] = data[p + static_cast<std::size_t>(i)];
            total += bits[i];
          }
          p += 16;
          if (p + static_cast<std::size_t>(total) > seg_end) {
            throw CorruptJpegError("short DHT");
          }
          if (tc == 0) {
            st.dc[th].build(bits, data.data() + p, total);
          } else {
            st.ac[th].build(bits, data.data() + p, total);
          }
          p += static_cast<std::size_t>(total);
        }
        break;
      }
      case 0xdd: {  // DRI
        st.restart_interval = read_u16(data, p);
        break;
      }
      case 0xda: {  // SOS
        if (!have_sof) throw CorruptJpegError("SOS before SOF");
        const int ns = data[p++];
        if (ns != static_cast<int>(st.comps.size())) {
          throw UnsupportedJpegError("unsupported multi-scan JPEG");
        }
        for (int i = 0; i < ns; ++i) {
          if (p + 2 > seg_end) throw CorruptJpegError("short SOS");
          const int cid = data[p];
          const int td = data[p + 1] >> 4, ta = data[p + 1] & 0x0f;
          p += 2;
          bool matched = false;
          for (auto& c : st.comps) {
            if (c.id == cid) {
              c.td = td;
              c.ta = ta;
              matched = true;
            }
          }
          if (!matched) throw CorruptJpegError("SOS names unknown component");
        }
        if (p + 3 > seg_end) throw CorruptJpegError("short SOS");
        const int ss = data[p], se = data[p + 1];
        p += 3;
        if (ss != 0 || se != 63) {
          throw UnsupportedJpegError("unsupported spectral selection");
        }
        decode_scan(data, p, st);
        // Scan consumed the rest of the entropy data; assemble the image.
        Image img = make_image(st.width, st.height);
        img.format = "jpeg";
        if (st.comps.size() == 1) {
          const auto& Y = st.comps[0];
          const int pw = Y.bw * 8;
          for (int y = 0; y < st.height; ++y) {
            for (int x = 0; x < st.width; ++x) {
              const std::uint8_t g = clamp_u8(
                  Y.plane[static_cast<std::size_t>(y) *
                              static_cast<std::size_t>(pw) +
                          static_cast<std::size_t>(x)]);
              img.samples[img.index(y, x, 0)] = g;
              img.samples[img.index(y, x, 1)] = g;
              img.samples[img.index(y, x, 2)] = g;
            }
          }
          return img;
        }
        const auto& Y = st.comps[0];
        const auto& Cb = st.comps[1];
        const auto& Cr = st.comps[2];
        const int ypw = Y.bw * 8, cpw = Cb.bw * 8;
        // Subsampled chroma upsamples with a half-pixel-aligned triangular
        // filter (identity when the component is not subsampled).
        const int csw = (st.width * Cb.hs + st.max_h - 1) / st.max_h;
        const int csh = (st.height * Cb.vs + st.max_v - 1) / st.max_v;
        auto chroma_at = [&](const Component& c, int y, int x) {
          const double fy = std::clamp(
              (y + 0.5) * c.vs / st.max_v - 0.5, 0.0,
              static_cast<double>(csh - 1));
          const double fx = std::clamp(
              (x + 0.5) * c.hs / st.max_h - 0.5, 0.0,
              static_cast<double>(csw - 1));
          const int y0 = static_cast<int>(fy);
          const int x0 = static_cast<int>(fx);
          const int y1 = std::min(y0 + 1, csh - 1);
          const int x1 = std::min(x0 + 1, csw - 1);
          const double wy = fy - y0, wx = fx - x0;
          auto v = [&](int yy, int xx) {
            return c.plane[static_cast<std::size_t>(yy) *
                               static_cast<std::size_t>(cpw) +
                           static_cast<std::size_t>(xx)];
          };
          const double top = v(y0, x0) + (v(y0, x1) - v(y0, x0)) * wx;
          const double bot = v(y1, x0) + (v(y1, x1) - v(y1, x0)) * wx;
          return top + (bot - top) * wy;
        };
        for (int y = 0; y < st.height; ++y) {
          for (int x = 0; x < st.width; ++x) {
            const double yy =
                Y.plane[static_cast<std::size_t>(y * Y.vs / st.max_v) *
                            static_cast<std::size_t>(ypw) +
                        static_cast<std::size_t>(x * Y.hs / st.max_h)];
            const double cb = chroma_at(Cb, y, x) - 128.0;
            const double cr = chroma_at(Cr, y, x) - 128.0;
            img.samples[img.index(y, x, 0)] = clamp_u8(yy + 1.402 * cr);
            img.samples[img.index(y, x, 1)] =
                clamp_u8(yy - 0.344136 * cb - 0.714136 * cr);
            img.samples[img.index(y, x, 2)] = clamp_u8(yy + 1.772 * cb);
          }
        }
        return img;
      }
      default:
        break;  // APPn, COM, others: skip payload
    }
    p = seg_end;
  }
}

}  // namespace patchscope
