#pragma once

// Shared helpers for the test suites: random tensors, parameter
// re-randomization for finite-difference conditioning, and synthetic images.

#include <string>
#include <utility>
#include <vector>

#include "s2sr/common.hpp"
#include "s2sr/image.hpp"
#include "s2sr/tensor.hpp"

namespace s2sr::testutil {

template <class T>
Tensor<T> rand_tensor(Rng& rng, Shape shape, double lo = -2.0, double hi = 2.0) {
  std::vector<T> v(size_t(numel_of(shape)));
  for (auto& x : v) x = T(rng.uniform(lo, hi));
  return Tensor<T>::from(std::move(shape), std::move(v));
}

// Finite-difference checks need parameters of O(1) magnitude: the production
// init (std 0.02) leaves cosine-normalized rows with tiny norms, where the
// normalize map's curvature swamps a step-1e-3 central difference. The tape
// gradient is exact either way; this keeps the oracle trustworthy.
template <class T>
void randomize_params(std::vector<std::pair<std::string, Tensor<T>>>& params, Rng& rng,
                      double lo = -0.7, double hi = 0.7) {
  for (auto& [name, p] : params) {
    (void)name;
    for (auto& v : p.data()) v = T(rng.uniform(lo, hi));
  }
}

// Natural-ish synthetic test image: one shared luminance field (gradient,
// sinusoidal texture, rectangles/discs) with smooth low-frequency chroma, so
// channels are correlated the way photographs are.
inline ImageU8 synth_image(Rng& rng, int64_t h, int64_t w) {
  ImageU8 img(h, w);
  double base = rng.uniform(70, 180);
  double gx = rng.uniform(-70, 70), gy = rng.uniform(-70, 70);
  double f1 = rng.uniform(0.08, 0.5), f2 = rng.uniform(0.08, 0.5);
  double p1 = rng.uniform(0, 6.28), p2 = rng.uniform(0, 6.28);
  double cu = rng.uniform(-18, 18), cv = rng.uniform(-18, 18);
  double cuf = rng.uniform(0.02, 0.08), cvf = rng.uniform(0.02, 0.08);

  std::vector<double> L(size_t(h * w));
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      L[size_t(y * w + x)] = base + gx * (double(x) / double(w) - 0.5) +
                             gy * (double(y) / double(h) - 0.5) +
                             22.0 * std::sin(f1 * double(x) + p1) * std::cos(f2 * double(y) + p2);

  int shapes = 3 + int(rng.uniform_int(4));
  for (int s = 0; s < shapes; ++s) {
    int64_t cy = rng.uniform_int(h), cx = rng.uniform_int(w);
    int64_t ry = 2 + rng.uniform_int(h / 4 + 1), rx = 2 + rng.uniform_int(w / 4 + 1);
    bool disc = rng.uniform() < 0.5;
    double lum = rng.uniform(40, 215);
    for (int64_t y = std::max<int64_t>(0, cy - ry); y < std::min(h, cy + ry); ++y)
      for (int64_t x = std::max<int64_t>(0, cx - rx); x < std::min(w, cx + rx); ++x) {
        if (disc) {
          double dy = double(y - cy) / double(ry), dx = double(x - cx) / double(rx);
          if (dy * dy + dx * dx > 1.0) continue;
        }
        L[size_t(y * w + x)] = lum;
      }
  }

  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      double l = L[size_t(y * w + x)] + rng.uniform(-2, 2);
      double u = cu * std::sin(cuf * double(x) + p1);
      double v = cv * std::cos(cvf * double(y) + p2);
      img.at(y, x, 0) = clamp_u8(l + 1.402 * v);
      img.at(y, x, 1) = clamp_u8(l - 0.344 * u - 0.714 * v);
      img.at(y, x, 2) = clamp_u8(l + 1.772 * u);
    }
  return img;
}

// Straight-line resize oracle: per output coordinate, walk every candidate
// source index, evaluate the (antialias-scaled) cubic directly, clamp,
// normalize. Independent of the ResizeTap machinery.
inline double oracle_resize_1d_at(const std::vector<double>& in, int64_t out_len, int64_t o,
                                  bool antialias) {
  auto cubic = [](double x) {
    const double a = -0.5;
    double ax = std::fabs(x);
    if (ax <= 1.0) return (a + 2.0) * ax * ax * ax - (a + 3.0) * ax * ax + 1.0;
    if (ax < 2.0) return a * (ax * ax * ax - 5.0 * ax * ax + 8.0 * ax - 4.0);
    return 0.0;
  };
  int64_t n = int64_t(in.size());
  double scale = double(out_len) / double(n);
  double kscale = (antialias && scale < 1.0) ? scale : 1.0;
  double u = (double(o) + 0.5) / scale - 0.5;
  double acc = 0, wsum = 0;
  for (int64_t i = int64_t(std::floor(u)) - int64_t(std::ceil(2.0 / kscale)) - 2;
       i <= int64_t(std::ceil(u)) + int64_t(std::ceil(2.0 / kscale)) + 2; ++i) {
    double w = kscale * cubic(kscale * (u - double(i)));
    if (w == 0.0) continue;
    int64_t idx = std::min(std::max<int64_t>(i, 0), n - 1);
    acc += w * in[size_t(idx)];
    wsum += w;
  }
  return acc / wsum;
}

// Separable 2-D application of the 1-D oracle.
inline std::vector<double> oracle_resize_plane(const std::vector<double>& in, int64_t h,
                                               int64_t w, int64_t oh, int64_t ow,
                                               bool antialias) {
  std::vector<double> tmp(size_t(oh * w));
  for (int64_t x = 0; x < w; ++x) {
    std::vector<double> col(static_cast<size_t>(h));
    for (int64_t y = 0; y < h; ++y) col[size_t(y)] = in[size_t(y * w + x)];
    for (int64_t y = 0; y < oh; ++y) tmp[size_t(y * w + x)] = oracle_resize_1d_at(col, oh, y, antialias);
  }
  std::vector<double> out(size_t(oh * ow));
  for (int64_t y = 0; y < oh; ++y) {
    std::vector<double> row(static_cast<size_t>(w));
    for (int64_t x = 0; x < w; ++x) row[size_t(x)] = tmp[size_t(y * w + x)];
    for (int64_t x = 0; x < ow; ++x) out[size_t(y * ow + x)] = oracle_resize_1d_at(row, ow, x, antialias);
  }
  return out;
}

// Plain all-channel PSNR between same-sized images.
inline double psnr_rgb(const ImageU8& a, const ImageU8& b) {
  double mse = 0;
  for (size_t i = 0; i < a.px.size(); ++i) {
    double d = double(a.px[i]) - double(b.px[i]);
    mse += d * d;
  }
  mse /= double(a.px.size());
  if (mse == 0) return 100.0;
  return 10.0 * std::log10(255.0 * 255.0 / mse);
}

}  // namespace s2sr::testutil
