#pragma once

// 8-bit interleaved sRGB rasters, PPM I/O, BT.601 color conversions (full
// range for the codec, studio range for metrics), and the dihedral-8
// transforms used by augmentation and self-ensemble.

#include <array>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "s2sr/tensor.hpp"

namespace s2sr {

struct ImageU8 {
  int64_t height = 0;
  int64_t width = 0;
  std::vector<uint8_t> px;  // 3 * height * width, RGB interleaved

  ImageU8() = default;
  ImageU8(int64_t h, int64_t w) : height(h), width(w), px(size_t(3 * h * w), 0) {
    if (h < 1 || w < 1) throw UsageError("image dimensions must be >= 1");
  }

  uint8_t& at(int64_t y, int64_t x, int64_t c) { return px[size_t((y * width + x) * 3 + c)]; }
  uint8_t at(int64_t y, int64_t x, int64_t c) const {
    return px[size_t((y * width + x) * 3 + c)];
  }
};

inline uint8_t clamp_u8(double v) {
  return uint8_t(v < 0.0 ? 0 : (v > 255.0 ? 255 : v + 0.5));
}

// ---------------------------------------------------------------------------
// PPM (P6, maxval 255).

inline void write_ppm(const ImageU8& img, const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw DataError("cannot open for writing: " + path);
  std::fprintf(f, "P6\n%lld %lld\n255\n", (long long)img.width, (long long)img.height);
  std::fwrite(img.px.data(), 1, img.px.size(), f);
  std::fclose(f);
}

inline ImageU8 read_ppm(const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw DataError("cannot open: " + path);
  char magic[3] = {0};
  long long w = 0, h = 0;
  int maxval = 0;
  auto skip_ws = [&]() {
    int ch;
    while ((ch = std::fgetc(f)) != EOF) {
      if (ch == '#') {
        while ((ch = std::fgetc(f)) != EOF && ch != '\n') {
        }
      } else if (!std::isspace(ch)) {
        std::ungetc(ch, f);
        return;
      }
    }
  };
  if (std::fscanf(f, "%2s", magic) != 1 || std::strcmp(magic, "P6") != 0) {
    std::fclose(f);
    throw DataError("not a P6 PPM: " + path);
  }
  skip_ws();
  if (std::fscanf(f, "%lld", &w) != 1) goto fail;
  skip_ws();
  if (std::fscanf(f, "%lld", &h) != 1) goto fail;
  skip_ws();
  if (std::fscanf(f, "%d", &maxval) != 1 || maxval != 255) goto fail;
  std::fgetc(f);  // single whitespace after header
  {
    ImageU8 img(h, w);
    if (std::fread(img.px.data(), 1, img.px.size(), f) != img.px.size()) goto fail;
    std::fclose(f);
    return img;
  }
fail:
  std::fclose(f);
  throw DataError("malformed PPM: " + path);
}

// ---------------------------------------------------------------------------
// Color conversion. Full-range BT.601 (JPEG convention) keeps Y,Cb,Cr in
// [0,255]; studio-range maps white to Y=235 and is what the metrics use.

inline void rgb_to_ycbcr_full(double r, double g, double b, double& y, double& cb, double& cr) {
  y = 0.299 * r + 0.587 * g + 0.114 * b;
  cb = 128.0 - 0.168735892 * r - 0.331264108 * g + 0.5 * b;
  cr = 128.0 + 0.5 * r - 0.418687589 * g - 0.081312411 * b;
}

inline void ycbcr_full_to_rgb(double y, double cb, double cr, double& r, double& g, double& b) {
  r = y + 1.402 * (cr - 128.0);
  g = y - 0.344136286 * (cb - 128.0) - 0.714136286 * (cr - 128.0);
  b = y + 1.772 * (cb - 128.0);
}

// Studio-range luma from 8-bit RGB: Y in [16,235].
inline double luma_studio(double r, double g, double b) {
  return 16.0 + (65.481 * r + 128.553 * g + 24.966 * b) / 255.0;
}

inline std::vector<double> luma_studio_plane(const ImageU8& img) {
  std::vector<double> y(size_t(img.height * img.width));
  for (int64_t i = 0; i < img.height * img.width; ++i)
    y[size_t(i)] =
        luma_studio(img.px[size_t(3 * i)], img.px[size_t(3 * i + 1)], img.px[size_t(3 * i + 2)]);
  return y;
}

// ---------------------------------------------------------------------------
// Tensor <-> image. Tensors are NCHW in [0,1].

template <class T>
Tensor<T> image_to_tensor(const ImageU8& img) {
  std::vector<T> v(size_t(3 * img.height * img.width));
  int64_t plane = img.height * img.width;
  for (int64_t i = 0; i < plane; ++i)
    for (int64_t c = 0; c < 3; ++c)
      v[size_t(c * plane + i)] = T(img.px[size_t(3 * i + c)]) / T(255);
  return Tensor<T>::from({1, 3, img.height, img.width}, std::move(v));
}

template <class T>
ImageU8 tensor_to_image(const Tensor<T>& t) {
  if (t.rank() != 4 || t.dim(0) != 1 || t.dim(1) != 3)
    throw ShapeError("tensor_to_image expects [1,3,H,W]");
  int64_t h = t.dim(2), w = t.dim(3), plane = h * w;
  ImageU8 img(h, w);
  for (int64_t i = 0; i < plane; ++i)
    for (int64_t c = 0; c < 3; ++c)
      img.px[size_t(3 * i + c)] = clamp_u8(double(t.ptr()[size_t(c * plane + i)]) * 255.0);
  return img;
}

// ---------------------------------------------------------------------------
// Dihedral group (the 8 flip/rotation symmetries of the square).
// Encoding: bit0 transpose, bit1 flip rows, bit2 flip cols, applied in that
// order when mapping output coordinates back to input coordinates.

inline void dihedral_dims(int op, int64_t h, int64_t w, int64_t& oh, int64_t& ow) {
  if (op & 1) {
    oh = w;
    ow = h;
  } else {
    oh = h;
    ow = w;
  }
}

// Source coordinate in the input image for output pixel (y, x).
inline void dihedral_source(int op, int64_t h, int64_t w, int64_t y, int64_t x, int64_t& sy,
                            int64_t& sx) {
  int64_t oh, ow;
  dihedral_dims(op, h, w, oh, ow);
  if (op & 2) y = oh - 1 - y;
  if (op & 4) x = ow - 1 - x;
  if (op & 1) {
    sy = x;
    sx = y;
  } else {
    sy = y;
    sx = x;
  }
}

inline ImageU8 dihedral_apply(const ImageU8& img, int op) {
  if (op < 0 || op > 7) throw UsageError("dihedral op must be in [0,8)");
  int64_t oh, ow;
  dihedral_dims(op, img.height, img.width, oh, ow);
  ImageU8 out(oh, ow);
  for (int64_t y = 0; y < oh; ++y)
    for (int64_t x = 0; x < ow; ++x) {
      int64_t sy, sx;
      dihedral_source(op, img.height, img.width, y, x, sy, sx);
      for (int64_t c = 0; c < 3; ++c) out.at(y, x, c) = img.at(sy, sx, c);
    }
  return out;
}

// Same transform on an NCHW tensor (inference-time use; not recorded on the
// tape).
template <class T>
Tensor<T> dihedral_apply_nchw(const Tensor<T>& t, int op) {
  if (op < 0 || op > 7) throw UsageError("dihedral op must be in [0,8)");
  if (t.rank() != 4) throw ShapeError("dihedral_apply_nchw expects [B,C,H,W]");
  int64_t B = t.dim(0), C = t.dim(1), H = t.dim(2), W = t.dim(3);
  int64_t oh, ow;
  dihedral_dims(op, H, W, oh, ow);
  Tensor<T> out = Tensor<T>::zeros({B, C, oh, ow});
  const T* src = t.ptr();
  T* dst = out.ptr();
  for (int64_t bc = 0; bc < B * C; ++bc)
    for (int64_t y = 0; y < oh; ++y)
      for (int64_t x = 0; x < ow; ++x) {
        int64_t sy, sx;
        dihedral_source(op, H, W, y, x, sy, sx);
        dst[(bc * oh + y) * ow + x] = src[(bc * H + sy) * W + sx];
      }
  return out;
}

// Index of the transform that undoes `op` (found by composing source maps on
// a probe rectangle; the group is tiny).
inline int dihedral_inverse(int op) {
  static const std::array<int, 8> inv = [] {
    std::array<int, 8> table{};
    const int64_t h = 3, w = 5;
    for (int a = 0; a < 8; ++a)
      for (int b = 0; b < 8; ++b) {
        int64_t ah, aw;
        dihedral_dims(a, h, w, ah, aw);
        int64_t bh, bw;
        dihedral_dims(b, ah, aw, bh, bw);
        if (bh != h || bw != w) continue;
        bool identity = true;
        for (int64_t y = 0; y < bh && identity; ++y)
          for (int64_t x = 0; x < bw && identity; ++x) {
            int64_t my, mx;  // through b, then through a
            dihedral_source(b, ah, aw, y, x, my, mx);
            int64_t sy, sx;
            dihedral_source(a, h, w, my, mx, sy, sx);
            if (sy != y || sx != x) identity = false;
          }
        if (identity) table[size_t(a)] = b;
      }
    return table;
  }();
  if (op < 0 || op > 7) throw UsageError("dihedral op must be in [0,8)");
  return inv[size_t(op)];
}

}  // namespace s2sr
