#pragma once

// Baseline sequential JPEG codec (JFIF byte stream).
//
// Encoder: BT.601 full-range YCbCr, 4:2:0 chroma with 2x2 box downsampling,
// 8x8 forward DCT, Annex-K quantization tables scaled by the IJG quality
// formula, zigzag, the standard Huffman tables, 0xFF byte stuffing.
// Markers emitted: SOI APP0 DQT SOF0 DHT SOS ... EOI.
//
// Decoder: inverts streams from this encoder and other baseline 4:2:0 or
// 4:4:4 single-scan files. Progressive mode, restart markers, and arithmetic
// coding are out of scope. Malformed input raises DataError naming the
// offending marker/byte offset.

#include <cmath>
#include <cstdint>
#include <vector>

#include "s2sr/image.hpp"

namespace s2sr {

namespace jpegdet {

// Annex K quantization tables (natural row-major order).
inline const uint8_t kQuantLuma[64] = {
    16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,
    14, 13, 16, 24, 40,  57,  69,  56,  14, 17, 22, 29, 51,  87,  80,  62,
    18, 22, 37, 56, 68,  109, 103, 77,  24, 35, 55, 64, 81,  104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};
inline const uint8_t kQuantChroma[64] = {
    17, 18, 24, 47, 99, 99, 99, 99, 18, 21, 26, 66, 99, 99, 99, 99,
    24, 26, 56, 99, 99, 99, 99, 99, 47, 66, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99};

// zigzag[i] = natural index of the i-th coefficient in zigzag order
inline const uint8_t kZigzag[64] = {
    0,  1,  8,  16, 9,  2,  3,  10, 17, 24, 32, 25, 18, 11, 4,  5,
    12, 19, 26, 33, 40, 48, 41, 34, 27, 20, 13, 6,  7,  14, 21, 28,
    35, 42, 49, 56, 57, 50, 43, 36, 29, 22, 15, 23, 30, 37, 44, 51,
    58, 59, 52, 45, 38, 31, 39, 46, 53, 60, 61, 54, 47, 55, 62, 63};

// Standard Huffman table specs (Annex K.3.3): code counts per bit length
// 1..16, then the symbol values.
inline const uint8_t kDcLumaBits[16] = {0, 1, 5, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0};
inline const uint8_t kDcLumaVals[12] = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11};
inline const uint8_t kDcChromaBits[16] = {0, 3, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0};
inline const uint8_t kDcChromaVals[12] = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11};
inline const uint8_t kAcLumaBits[16] = {0, 2, 1, 3, 3, 2, 4, 3, 5, 5, 4, 4, 0, 0, 1, 0x7d};
inline const uint8_t kAcLumaVals[162] = {
    0x01, 0x02, 0x03, 0x00, 0x04, 0x11, 0x05, 0x12, 0x21, 0x31, 0x41, 0x06, 0x13, 0x51, 0x61,
    0x07, 0x22, 0x71, 0x14, 0x32, 0x81, 0x91, 0xa1, 0x08, 0x23, 0x42, 0xb1, 0xc1, 0x15, 0x52,
    0xd1, 0xf0, 0x24, 0x33, 0x62, 0x72, 0x82, 0x09, 0x0a, 0x16, 0x17, 0x18, 0x19, 0x1a, 0x25,
    0x26, 0x27, 0x28, 0x29, 0x2a, 0x34, 0x35, 0x36, 0x37, 0x38, 0x39, 0x3a, 0x43, 0x44, 0x45,
    0x46, 0x47, 0x48, 0x49, 0x4a, 0x53, 0x54, 0x55, 0x56, 0x57, 0x58, 0x59, 0x5a, 0x63, 0x64,
    0x65, 0x66, 0x67, 0x68, 0x69, 0x6a, 0x73, 0x74, 0x75, 0x76, 0x77, 0x78, 0x79, 0x7a, 0x83,
    0x84, 0x85, 0x86, 0x87, 0x88, 0x89, 0x8a, 0x92, 0x93, 0x94, 0x95, 0x96, 0x97, 0x98, 0x99,
    0x9a, 0xa2, 0xa3, 0xa4, 0xa5, 0xa6, 0xa7, 0xa8, 0xa9, 0xaa, 0xb2, 0xb3, 0xb4, 0xb5, 0xb6,
    0xb7, 0xb8, 0xb9, 0xba, 0xc2, 0xc3, 0xc4, 0xc5, 0xc6, 0xc7, 0xc8, 0xc9, 0xca, 0xd2, 0xd3,
    0xd4, 0xd5, 0xd6, 0xd7, 0xd8, 0xd9, 0xda, 0xe1, 0xe2, 0xe3, 0xe4, 0xe5, 0xe6, 0xe7, 0xe8,
    0xe9, 0xea, 0xf1, 0xf2, 0xf3, 0xf4, 0xf5, 0xf6, 0xf7, 0xf8, 0xf9, 0xfa};
inline const uint8_t kAcChromaBits[16] = {0, 2, 1, 2, 4, 4, 3, 4, 7, 5, 4, 4, 0, 1, 2, 0x77};
inline const uint8_t kAcChromaVals[162] = {
    0x00, 0x01, 0x02, 0x03, 0x11, 0x04, 0x05, 0x21, 0x31, 0x06, 0x12, 0x41, 0x51, 0x07, 0x61,
    0x71, 0x13, 0x22, 0x32, 0x81, 0x08, 0x14, 0x42, 0x91, 0xa1, 0xb1, 0xc1, 0x09, 0x23, 0x33,
    0x52, 0xf0, 0x15, 0x62, 0x72, 0xd1, 0x0a, 0x16, 0x24, 0x34, 0xe1, 0x25, 0xf1, 0x17, 0x18,
    0x19, 0x1a, 0x26, 0x27, 0x28, 0x29, 0x2a, 0x35, 0x36, 0x37, 0x38, 0x39, 0x3a, 0x43, 0x44,
    0x45, 0x46, 0x47, 0x48, 0x49, 0x4a, 0x53, 0x54, 0x55, 0x56, 0x57, 0x58, 0x59, 0x5a, 0x63,
    0x64, 0x65, 0x66, 0x67, 0x68, 0x69, 0x6a, 0x73, 0x74, 0x75, 0x76, 0x77, 0x78, 0x79, 0x7a,
    0x82, 0x83, 0x84, 0x85, 0x86, 0x87, 0x88, 0x89, 0x8a, 0x92, 0x93, 0x94, 0x95, 0x96, 0x97,
    0x98, 0x99, 0x9a, 0xa2, 0xa3, 0xa4, 0xa5, 0xa6, 0xa7, 0xa8, 0xa9, 0xaa, 0xb2, 0xb3, 0xb4,
    0xb5, 0xb6, 0xb7, 0xb8, 0xb9, 0xba, 0xc2, 0xc3, 0xc4, 0xc5, 0xc6, 0xc7, 0xc8, 0xc9, 0xca,
    0xd2, 0xd3, 0xd4, 0xd5, 0xd6, 0xd7, 0xd8, 0xd9, 0xda, 0xe2, 0xe3, 0xe4, 0xe5, 0xe6, 0xe7,
    0xe8, 0xe9, 0xea, 0xf2, 0xf3, 0xf4, 0xf5, 0xf6, 0xf7, 0xf8, 0xf9, 0xfa};

// 8x8 DCT basis: M[u][x] = C(u)/2 * cos((2x+1) u pi / 16).
inline const double* dct_matrix() {
  static const std::vector<double> m = [] {
    std::vector<double> v(64);
    for (int u = 0; u < 8; ++u)
      for (int x = 0; x < 8; ++x) {
        double cu = u == 0 ? std::sqrt(0.5) : 1.0;
        v[size_t(u * 8 + x)] = 0.5 * cu * std::cos((2.0 * x + 1.0) * u * M_PI / 16.0);
      }
    return v;
  }();
  return m.data();
}

inline void fdct8x8(const double* in, double* out) {
  const double* M = dct_matrix();
  double tmp[64];
  for (int u = 0; u < 8; ++u)
    for (int x = 0; x < 8; ++x) {
      double acc = 0;
      for (int k = 0; k < 8; ++k) acc += M[u * 8 + k] * in[k * 8 + x];
      tmp[u * 8 + x] = acc;
    }
  for (int u = 0; u < 8; ++u)
    for (int v = 0; v < 8; ++v) {
      double acc = 0;
      for (int k = 0; k < 8; ++k) acc += tmp[u * 8 + k] * M[v * 8 + k];
      out[u * 8 + v] = acc;
    }
}

inline void idct8x8(const double* in, double* out) {
  const double* M = dct_matrix();
  double tmp[64];
  for (int x = 0; x < 8; ++x)
    for (int v = 0; v < 8; ++v) {
      double acc = 0;
      for (int k = 0; k < 8; ++k) acc += M[k * 8 + x] * in[k * 8 + v];
      tmp[x * 8 + v] = acc;
    }
  for (int x = 0; x < 8; ++x)
    for (int y = 0; y < 8; ++y) {
      double acc = 0;
      for (int k = 0; k < 8; ++k) acc += tmp[x * 8 + k] * M[k * 8 + y];
      out[x * 8 + y] = acc;
    }
}

struct HuffCode {
  uint16_t code = 0;
  uint8_t len = 0;
};

inline void build_encode_table(const uint8_t bits[16], const uint8_t* vals, HuffCode table[256]) {
  uint16_t code = 0;
  int k = 0;
  for (int len = 1; len <= 16; ++len) {
    for (int i = 0; i < bits[len - 1]; ++i) {
      table[vals[k]].code = code++;
      table[vals[k]].len = uint8_t(len);
      ++k;
    }
    code = uint16_t(code << 1);
  }
}

struct BitWriter {
  std::vector<uint8_t>& out;
  uint32_t acc = 0;
  int nbits = 0;

  explicit BitWriter(std::vector<uint8_t>& o) : out(o) {}

  void put(uint16_t code, int len) {
    acc = (acc << len) | code;
    nbits += len;
    while (nbits >= 8) {
      uint8_t byte = uint8_t((acc >> (nbits - 8)) & 0xFF);
      out.push_back(byte);
      if (byte == 0xFF) out.push_back(0x00);  // stuffing
      nbits -= 8;
    }
  }

  void flush() {
    if (nbits > 0) put(uint16_t((1 << (8 - nbits)) - 1), 8 - nbits);  // pad with 1s
  }
};

// Magnitude category and offset bits for a nonzero value.
inline int bit_size(int v) {
  int a = v < 0 ? -v : v;
  int n = 0;
  while (a) {
    ++n;
    a >>= 1;
  }
  return n;
}

}  // namespace jpegdet

struct JpegQuality {
  int q;
  explicit JpegQuality(int quality) : q(quality) {
    if (q < 1 || q > 100) throw UsageError("JPEG quality must be in [1,100]");
  }
};

// IJG quality scaling: entry = clamp(round(base*s/100), 1, 255) with
// s = q<50 ? 5000/q : 200-2q.
inline void scale_quant_table(const uint8_t* base, int quality, uint16_t out[64]) {
  JpegQuality jq(quality);
  int s = jq.q < 50 ? 5000 / jq.q : 200 - 2 * jq.q;
  for (int i = 0; i < 64; ++i) {
    int v = (base[i] * s + 50) / 100;
    out[i] = uint16_t(v < 1 ? 1 : (v > 255 ? 255 : v));
  }
}

inline std::vector<uint8_t> jpeg_encode(const ImageU8& img, int quality) {
  using namespace jpegdet;
  JpegQuality jq(quality);

  int64_t H = img.height, W = img.width;
  int64_t Hp = ceil_to(H, 16), Wp = ceil_to(W, 16);

  // color convert on the edge-padded canvas
  std::vector<double> Y(size_t(Hp * Wp)), Cb(size_t(Hp * Wp)), Cr(size_t(Hp * Wp));
  for (int64_t y = 0; y < Hp; ++y)
    for (int64_t x = 0; x < Wp; ++x) {
      int64_t sy = std::min(y, H - 1), sx = std::min(x, W - 1);
      double yy, cb, cr;
      rgb_to_ycbcr_full(img.at(sy, sx, 0), img.at(sy, sx, 1), img.at(sy, sx, 2), yy, cb, cr);
      Y[size_t(y * Wp + x)] = yy;
      Cb[size_t(y * Wp + x)] = cb;
      Cr[size_t(y * Wp + x)] = cr;
    }
  // 4:2:0 chroma: 2x2 box means
  int64_t Hc = Hp / 2, Wc = Wp / 2;
  std::vector<double> cb2(size_t(Hc * Wc)), cr2(size_t(Hc * Wc));
  for (int64_t y = 0; y < Hc; ++y)
    for (int64_t x = 0; x < Wc; ++x) {
      int64_t o = 2 * y * Wp + 2 * x;
      cb2[size_t(y * Wc + x)] =
          0.25 * (Cb[size_t(o)] + Cb[size_t(o + 1)] + Cb[size_t(o + Wp)] + Cb[size_t(o + Wp + 1)]);
      cr2[size_t(y * Wc + x)] =
          0.25 * (Cr[size_t(o)] + Cr[size_t(o + 1)] + Cr[size_t(o + Wp)] + Cr[size_t(o + Wp + 1)]);
    }

  uint16_t qluma[64], qchroma[64];
  scale_quant_table(kQuantLuma, jq.q, qluma);
  scale_quant_table(kQuantChroma, jq.q, qchroma);

  HuffCode dc_l[256], ac_l[256], dc_c[256], ac_c[256];
  build_encode_table(kDcLumaBits, kDcLumaVals, dc_l);
  build_encode_table(kAcLumaBits, kAcLumaVals, ac_l);
  build_encode_table(kDcChromaBits, kDcChromaVals, dc_c);
  build_encode_table(kAcChromaBits, kAcChromaVals, ac_c);

  std::vector<uint8_t> out;
  auto byte = [&](uint8_t b) { out.push_back(b); };
  auto be16 = [&](uint16_t v) {
    byte(uint8_t(v >> 8));
    byte(uint8_t(v & 0xFF));
  };
  auto marker = [&](uint8_t id, uint16_t len) {
    byte(0xFF);
    byte(id);
    be16(len);
  };

  byte(0xFF);
  byte(0xD8);  // SOI
  marker(0xE0, 16);  // APP0 / JFIF
  for (char c : {'J', 'F', 'I', 'F', '\0'}) byte(uint8_t(c));
  byte(1);
  byte(1);  // version 1.1
  byte(0);  // no density units
  be16(1);
  be16(1);
  byte(0);
  byte(0);  // no thumbnail

  // DQT: two tables, zigzag order
  marker(0xDB, 2 + 2 * 65);
  byte(0x00);
  for (int i = 0; i < 64; ++i) byte(uint8_t(qluma[kZigzag[i]]));
  byte(0x01);
  for (int i = 0; i < 64; ++i) byte(uint8_t(qchroma[kZigzag[i]]));

  // SOF0
  marker(0xC0, 2 + 6 + 3 * 3);
  byte(8);  // precision
  be16(uint16_t(H));
  be16(uint16_t(W));
  byte(3);
  byte(1);
  byte(0x22);
  byte(0);  // Y: 2x2 sampling, quant table 0
  byte(2);
  byte(0x11);
  byte(1);  // Cb
  byte(3);
  byte(0x11);
  byte(1);  // Cr

  // DHT: four standard tables
  auto emit_dht = [&](uint8_t cls_id, const uint8_t bits[16], const uint8_t* vals) {
    int count = 0;
    for (int i = 0; i < 16; ++i) count += bits[i];
    marker(0xC4, uint16_t(2 + 1 + 16 + count));
    byte(cls_id);
    for (int i = 0; i < 16; ++i) byte(bits[i]);
    for (int i = 0; i < count; ++i) byte(vals[i]);
  };
  emit_dht(0x00, kDcLumaBits, kDcLumaVals);
  emit_dht(0x10, kAcLumaBits, kAcLumaVals);
  emit_dht(0x01, kDcChromaBits, kDcChromaVals);
  emit_dht(0x11, kAcChromaBits, kAcChromaVals);

  // SOS
  marker(0xDA, 2 + 1 + 2 * 3 + 3);
  byte(3);
  byte(1);
  byte(0x00);  // Y uses DC0/AC0
  byte(2);
  byte(0x11);  // Cb uses DC1/AC1
  byte(3);
  byte(0x11);  // Cr
  byte(0);
  byte(63);
  byte(0);  // spectral selection (baseline fixed)

  BitWriter bw(out);
  int prev_dc[3] = {0, 0, 0};

  auto encode_block = [&](const std::vector<double>& plane, int64_t pw, int64_t bx, int64_t by,
                          const uint16_t* qt, const HuffCode* dct_tbl, const HuffCode* act_tbl,
                          int comp) {
    double block[64], coef[64];
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x)
        block[y * 8 + x] = plane[size_t((by + y) * pw + bx + x)] - 128.0;
    fdct8x8(block, coef);
    int quant[64];
    for (int i = 0; i < 64; ++i) {
      double v = coef[kZigzag[i]] / double(qt[kZigzag[i]]);
      quant[i] = int(std::lround(v));
    }
    // DC difference
    int diff = quant[0] - prev_dc[comp];
    prev_dc[comp] = quant[0];
    int size = diff == 0 ? 0 : bit_size(diff);
    bw.put(dct_tbl[size].code, dct_tbl[size].len);
    if (size > 0) {
      int bits = diff < 0 ? diff + (1 << size) - 1 : diff;
      bw.put(uint16_t(bits), size);
    }
    // AC run-length
    int last_nz = 0;
    for (int i = 1; i < 64; ++i)
      if (quant[i] != 0) last_nz = i;
    int run = 0;
    for (int i = 1; i <= last_nz; ++i) {
      if (quant[i] == 0) {
        ++run;
        continue;
      }
      while (run >= 16) {
        bw.put(act_tbl[0xF0].code, act_tbl[0xF0].len);  // ZRL
        run -= 16;
      }
      int s = bit_size(quant[i]);
      int sym = (run << 4) | s;
      bw.put(act_tbl[sym].code, act_tbl[sym].len);
      int bits = quant[i] < 0 ? quant[i] + (1 << s) - 1 : quant[i];
      bw.put(uint16_t(bits), s);
      run = 0;
    }
    if (last_nz != 63) bw.put(act_tbl[0x00].code, act_tbl[0x00].len);  // EOB
  };

  for (int64_t my = 0; my < Hp / 16; ++my)
    for (int64_t mx = 0; mx < Wp / 16; ++mx) {
      for (int64_t sy = 0; sy < 2; ++sy)
        for (int64_t sx = 0; sx < 2; ++sx)
          encode_block(Y, Wp, mx * 16 + sx * 8, my * 16 + sy * 8, qluma, dc_l, ac_l, 0);
      encode_block(cb2, Wc, mx * 8, my * 8, qchroma, dc_c, ac_c, 1);
      encode_block(cr2, Wc, mx * 8, my * 8, qchroma, dc_c, ac_c, 2);
    }
  bw.flush();

  byte(0xFF);
  byte(0xD9);  // EOI
  return out;
}

// ---------------------------------------------------------------------------
// Decoder.

namespace jpegdet {

struct HuffDecoder {
  // JPEG canonical decode tables (F.2.2.3).
  int32_t mincode[17] = {0};
  int32_t maxcode[17] = {0};
  int32_t valptr[17] = {0};
  std::vector<uint8_t> vals;
  bool present = false;

  void build(const uint8_t bits[16], const uint8_t* values, int count) {
    vals.assign(values, values + count);
    int32_t code = 0;
    int k = 0;
    for (int len = 1; len <= 16; ++len) {
      if (bits[len - 1] == 0) {
        maxcode[len] = -1;
        mincode[len] = 0;
        valptr[len] = k;
      } else {
        valptr[len] = k;
        mincode[len] = code;
        code += bits[len - 1];
        k += bits[len - 1];
        maxcode[len] = code - 1;
      }
      code <<= 1;
    }
    present = true;
  }
};

struct BitReader {
  const std::vector<uint8_t>& data;
  size_t pos;
  uint32_t acc = 0;
  int nbits = 0;

  BitReader(const std::vector<uint8_t>& d, size_t start) : data(d), pos(start) {}

  int bit() {
    if (nbits == 0) {
      if (pos >= data.size()) throw DataError("JPEG entropy data truncated at byte offset " +
                                              std::to_string(pos));
      uint8_t b = data[pos++];
      if (b == 0xFF) {
        if (pos >= data.size())
          throw DataError("JPEG stream ends inside a marker at byte offset " +
                          std::to_string(pos));
        uint8_t n = data[pos++];
        if (n == 0x00) {
          // stuffed byte
        } else {
          throw DataError("unexpected marker 0xFF" + std::to_string(int(n)) +
                          " inside entropy data at byte offset " + std::to_string(pos - 2));
        }
      }
      acc = b;
      nbits = 8;
    }
    --nbits;
    return int((acc >> nbits) & 1);
  }

  int receive(int n) {
    int v = 0;
    for (int i = 0; i < n; ++i) v = (v << 1) | bit();
    return v;
  }
};

inline int huff_decode(BitReader& br, const HuffDecoder& h) {
  int32_t code = br.bit();
  for (int len = 1; len <= 16; ++len) {
    if (h.maxcode[len] >= 0 && code <= h.maxcode[len])
      return h.vals[size_t(h.valptr[len] + code - h.mincode[len])];
    code = (code << 1) | br.bit();
  }
  throw DataError("invalid Huffman code in entropy data at byte offset " +
                  std::to_string(br.pos));
}

// sign extension of an n-bit magnitude (F.2.2.1 EXTEND)
inline int extend(int v, int n) { return n == 0 ? 0 : (v < (1 << (n - 1)) ? v - (1 << n) + 1 : v); }

}  // namespace jpegdet

inline ImageU8 jpeg_decode(const std::vector<uint8_t>& data) {
  using namespace jpegdet;
  auto fail = [&](const std::string& what, size_t off) {
    throw DataError("JPEG decode error: " + what + " at byte offset " + std::to_string(off));
  };

  size_t pos = 0;
  auto need = [&](size_t n) {
    if (pos + n > data.size()) fail("unexpected end of stream", pos);
  };
  auto u8 = [&]() {
    need(1);
    return data[pos++];
  };
  auto u16 = [&]() {
    need(2);
    uint16_t v = uint16_t((data[pos] << 8) | data[pos + 1]);
    pos += 2;
    return v;
  };

  need(2);
  if (data[0] != 0xFF || data[1] != 0xD8) fail("missing SOI marker", 0);
  pos = 2;

  uint16_t qt[4][64];
  bool qt_seen[4] = {false, false, false, false};
  HuffDecoder huff_dc[4], huff_ac[4];

  struct Component {
    int id = 0, hs = 1, vs = 1, tq = 0, td = 0, ta = 0;
    int64_t bw = 0, bh = 0;  // block grid dims
    std::vector<double> plane;
    int64_t pw = 0, ph = 0;
  };
  std::vector<Component> comps;
  int64_t H = 0, W = 0;
  int hmax = 1, vmax = 1;
  bool sof_seen = false;

  while (true) {
    size_t marker_off = pos;
    need(2);
    if (data[pos] != 0xFF) fail("expected marker", marker_off);
    uint8_t m = data[pos + 1];
    pos += 2;
    if (m == 0xD9) fail("EOI before SOS", marker_off);

    if (m == 0xDB) {  // DQT
      size_t end = marker_off + 2 + u16();
      while (pos < end) {
        uint8_t pq_tq = u8();
        int prec = pq_tq >> 4, id = pq_tq & 15;
        if (id > 3) fail("DQT table id out of range", marker_off);
        for (int i = 0; i < 64; ++i) {
          int v = prec ? u16() : u8();
          qt[id][kZigzag[i]] = uint16_t(v);
        }
        qt_seen[id] = true;
      }
    } else if (m == 0xC4) {  // DHT
      size_t end = marker_off + 2 + u16();
      while (pos < end) {
        uint8_t tc_th = u8();
        int cls = tc_th >> 4, id = tc_th & 15;
        if (id > 3 || cls > 1) fail("DHT table spec invalid", marker_off);
        uint8_t bits[16];
        int count = 0;
        for (int i = 0; i < 16; ++i) {
          bits[i] = u8();
          count += bits[i];
        }
        need(size_t(count));
        (cls == 0 ? huff_dc[id] : huff_ac[id]).build(bits, &data[pos], count);
        pos += size_t(count);
      }
    } else if (m == 0xC0) {  // SOF0 baseline
      u16();
      if (u8() != 8) fail("only 8-bit precision supported", marker_off);
      H = u16();
      W = u16();
      int nc = u8();
      if (H < 1 || W < 1) fail("invalid dimensions", marker_off);
      if (nc != 1 && nc != 3) fail("unsupported component count", marker_off);
      comps.resize(size_t(nc));
      for (auto& c : comps) {
        c.id = u8();
        uint8_t s = u8();
        c.hs = s >> 4;
        c.vs = s & 15;
        c.tq = u8();
        if (c.hs < 1 || c.hs > 2 || c.vs < 1 || c.vs > 2)
          fail("unsupported sampling factor", marker_off);
        hmax = std::max(hmax, c.hs);
        vmax = std::max(vmax, c.vs);
      }
      sof_seen = true;
    } else if (m == 0xC1 || m == 0xC2 || m == 0xC3 || (m >= 0xC5 && m <= 0xCF && m != 0xC8)) {
      fail("unsupported SOF type (baseline sequential only)", marker_off);
    } else if (m == 0xDD) {
      fail("restart intervals unsupported", marker_off);
    } else if (m == 0xDA) {  // SOS
      if (!sof_seen) fail("SOS before SOF", marker_off);
      u16();
      int ns = u8();
      if (ns != int(comps.size())) fail("scan component count mismatch", marker_off);
      for (int i = 0; i < ns; ++i) {
        int cid = u8();
        uint8_t t = u8();
        bool found = false;
        for (auto& c : comps)
          if (c.id == cid) {
            c.td = t >> 4;
            c.ta = t & 15;
            found = true;
          }
        if (!found) fail("scan references unknown component", marker_off);
      }
      u8();
      u8();
      u8();  // spectral selection bytes
      break;
    } else if (m == 0x01 || (m >= 0xD0 && m <= 0xD7)) {
      // parameterless markers
    } else {
      // skip APPn/COM/other segments with length
      size_t len = u16();
      if (len < 2) fail("invalid segment length", marker_off);
      need(len - 2);
      pos += len - 2;
    }
  }

  // MCU geometry
  int64_t mcu_w = 8 * hmax, mcu_h = 8 * vmax;
  int64_t mcus_x = (W + mcu_w - 1) / mcu_w, mcus_y = (H + mcu_h - 1) / mcu_h;
  for (auto& c : comps) {
    if (!qt_seen[c.tq]) fail("missing quantization table", pos);
    if (!huff_dc[c.td].present || !huff_ac[c.ta].present) fail("missing Huffman table", pos);
    c.pw = mcus_x * 8 * c.hs;
    c.ph = mcus_y * 8 * c.vs;
    c.plane.assign(size_t(c.pw * c.ph), 0.0);
  }

  BitReader br(data, pos);
  std::vector<int> prev_dc(comps.size(), 0);
  double coef[64], pix[64];

  for (int64_t my = 0; my < mcus_y; ++my)
    for (int64_t mx = 0; mx < mcus_x; ++mx)
      for (size_t ci = 0; ci < comps.size(); ++ci) {
        auto& c = comps[ci];
        for (int by = 0; by < c.vs; ++by)
          for (int bx = 0; bx < c.hs; ++bx) {
            int zz[64] = {0};
            int t = huff_decode(br, huff_dc[c.td]);
            if (t > 11) fail("DC category out of range", br.pos);
            int diff = extend(br.receive(t), t);
            prev_dc[ci] += diff;
            zz[0] = prev_dc[ci];
            for (int k = 1; k < 64;) {
              int rs = huff_decode(br, huff_ac[c.ta]);
              int r = rs >> 4, s = rs & 15;
              if (s == 0) {
                if (r == 15) {
                  k += 16;
                  continue;
                }
                break;  // EOB
              }
              k += r;
              if (k > 63) fail("AC run overflows block", br.pos);
              zz[k] = extend(br.receive(s), s);
              ++k;
            }
            for (int i = 0; i < 64; ++i) coef[kZigzag[i]] = double(zz[i]) * qt[c.tq][kZigzag[i]];
            idct8x8(coef, pix);
            int64_t ox = (mx * c.hs + bx) * 8, oy = (my * c.vs + by) * 8;
            for (int y = 0; y < 8; ++y)
              for (int x = 0; x < 8; ++x)
                c.plane[size_t((oy + y) * c.pw + ox + x)] = pix[y * 8 + x] + 128.0;
          }
      }

  // trailing EOI (after any pad bits)
  ImageU8 img(H, W);
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x) {
      double ycc[3];
      for (size_t ci = 0; ci < comps.size(); ++ci) {
        auto& c = comps[ci];
        int64_t sy = y * c.vs / vmax, sx = x * c.hs / hmax;
        ycc[ci] = c.plane[size_t(sy * c.pw + sx)];
      }
      double r, g, b;
      if (comps.size() == 3) {
        ycbcr_full_to_rgb(ycc[0], ycc[1], ycc[2], r, g, b);
      } else {
        r = g = b = ycc[0];
      }
      img.at(y, x, 0) = clamp_u8(r);
      img.at(y, x, 1) = clamp_u8(g);
      img.at(y, x, 2) = clamp_u8(b);
    }
  return img;
}

}  // namespace s2sr
