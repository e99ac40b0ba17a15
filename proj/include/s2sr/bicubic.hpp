#pragma once

// Separable bicubic resampling with the a=-0.5 cubic kernel. Matches
// imresize semantics: half-pixel-centered coordinate mapping, kernel widened
// by the scale factor when shrinking with antialiasing on, weights
// normalized to unit sum. Out-of-range taps clamp to the edge sample.
//
// The same tap tables drive three surfaces: plain image resizing, the
// bicubic skip branch, and the differentiable downsampling inside the
// auxiliary loss (backward scatters through the taps).

#include <cmath>

#include "s2sr/image.hpp"
#include "s2sr/ops.hpp"

namespace s2sr {

inline double cubic_keys(double x) {
  const double a = -0.5;
  double ax = std::fabs(x);
  if (ax <= 1.0) return (a + 2.0) * ax * ax * ax - (a + 3.0) * ax * ax + 1.0;
  if (ax < 2.0) return a * (ax * ax * ax - 5.0 * ax * ax + 8.0 * ax - 4.0);
  return 0.0;
}

struct ResizeTap {
  std::vector<int64_t> indices;  // clamped source indices
  std::vector<double> weights;   // normalized, sum 1
};

inline std::vector<ResizeTap> bicubic_contributions(int64_t in_len, int64_t out_len,
                                                    bool antialias) {
  if (in_len < 1 || out_len < 1) throw UsageError("resize lengths must be >= 1");
  double scale = double(out_len) / double(in_len);
  double kscale = (antialias && scale < 1.0) ? scale : 1.0;
  double support = 2.0 / kscale;
  std::vector<ResizeTap> taps(static_cast<size_t>(out_len));
  for (int64_t o = 0; o < out_len; ++o) {
    double u = (double(o) + 0.5) / scale - 0.5;
    int64_t left = int64_t(std::floor(u - support)) ;
    int64_t right = int64_t(std::ceil(u + support));
    ResizeTap tap;
    double sum = 0.0;
    for (int64_t i = left; i <= right; ++i) {
      double w = kscale * cubic_keys(kscale * (u - double(i)));
      if (w == 0.0) continue;
      int64_t idx = std::min(std::max<int64_t>(i, 0), in_len - 1);
      tap.indices.push_back(idx);
      tap.weights.push_back(w);
      sum += w;
    }
    if (tap.weights.empty()) {
      tap.indices.push_back(std::min(std::max<int64_t>(int64_t(std::lround(u)), 0), in_len - 1));
      tap.weights.push_back(1.0);
      sum = 1.0;
    }
    for (auto& w : tap.weights) w /= sum;
    taps[size_t(o)] = std::move(tap);
  }
  return taps;
}

// Resize one plane (row-major, doubles) to [out_h, out_w].
inline std::vector<double> resize_plane(const std::vector<double>& in, int64_t h, int64_t w,
                                        int64_t oh, int64_t ow, bool antialias) {
  auto vtaps = bicubic_contributions(h, oh, antialias);
  auto htaps = bicubic_contributions(w, ow, antialias);
  std::vector<double> tmp(size_t(oh * w));
  for (int64_t y = 0; y < oh; ++y) {
    const auto& t = vtaps[size_t(y)];
    for (int64_t x = 0; x < w; ++x) {
      double acc = 0;
      for (size_t k = 0; k < t.indices.size(); ++k)
        acc += t.weights[k] * in[size_t(t.indices[k] * w + x)];
      tmp[size_t(y * w + x)] = acc;
    }
  }
  std::vector<double> out(size_t(oh * ow));
  for (int64_t y = 0; y < oh; ++y)
    for (int64_t x = 0; x < ow; ++x) {
      const auto& t = htaps[size_t(x)];
      double acc = 0;
      for (size_t k = 0; k < t.indices.size(); ++k)
        acc += t.weights[k] * tmp[size_t(y * w + t.indices[k])];
      out[size_t(y * ow + x)] = acc;
    }
  return out;
}

inline ImageU8 bicubic_resize(const ImageU8& img, int64_t out_h, int64_t out_w, bool antialias) {
  if (out_h == img.height && out_w == img.width) return img;
  ImageU8 out(out_h, out_w);
  int64_t plane = img.height * img.width;
  std::vector<double> chan(static_cast<size_t>(plane));
  for (int64_t c = 0; c < 3; ++c) {
    for (int64_t i = 0; i < plane; ++i) chan[size_t(i)] = img.px[size_t(3 * i + c)];
    auto r = resize_plane(chan, img.height, img.width, out_h, out_w, antialias);
    for (int64_t i = 0; i < out_h * out_w; ++i) out.px[size_t(3 * i + c)] = clamp_u8(r[size_t(i)]);
  }
  return out;
}

namespace detail {

// Apply taps along one spatial axis of [B,C,H,W]. axis: 2 (H) or 3 (W).
template <class T>
std::vector<T> taps_forward(const std::vector<T>& in, int64_t planes, int64_t H, int64_t W,
                            const std::vector<ResizeTap>& taps, int axis) {
  int64_t out_len = int64_t(taps.size());
  int64_t oh = axis == 2 ? out_len : H;
  int64_t ow = axis == 3 ? out_len : W;
  std::vector<T> out(size_t(planes * oh * ow), T(0));
  for (int64_t p = 0; p < planes; ++p) {
    const T* ip = in.data() + p * H * W;
    T* op = out.data() + p * oh * ow;
    if (axis == 2) {
      for (int64_t y = 0; y < oh; ++y) {
        const auto& t = taps[size_t(y)];
        for (size_t k = 0; k < t.indices.size(); ++k) {
          T wt = T(t.weights[k]);
          const T* irow = ip + t.indices[k] * W;
          T* orow = op + y * ow;
          for (int64_t x = 0; x < W; ++x) orow[x] += wt * irow[x];
        }
      }
    } else {
      for (int64_t y = 0; y < H; ++y) {
        const T* irow = ip + y * W;
        T* orow = op + y * ow;
        for (int64_t x = 0; x < ow; ++x) {
          const auto& t = taps[size_t(x)];
          T acc = 0;
          for (size_t k = 0; k < t.indices.size(); ++k)
            acc += T(t.weights[k]) * irow[t.indices[k]];
          orow[x] = acc;
        }
      }
    }
  }
  return out;
}

}  // namespace detail

// Differentiable separable resize of [B,C,H,W] along one axis.
template <class T>
Tensor<T> resize_axis(const Tensor<T>& x, const std::vector<ResizeTap>& taps, int axis) {
  if (x.rank() != 4) throw ShapeError("resize_axis expects [B,C,H,W]");
  if (axis != 2 && axis != 3) throw UsageError("resize axis must be 2 or 3");
  int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  int64_t out_len = int64_t(taps.size());
  auto out = detail::taps_forward(x.data(), B * C, H, W, taps, axis);
  Shape os{B, C, axis == 2 ? out_len : H, axis == 3 ? out_len : W};
  Tensor<T> res(os, std::move(out));
  if (!tracing<T>({&x})) return res;
  res.set_requires_grad(true);
  auto xn = x.node();
  auto on = res.node();
  int64_t oh = os[2], ow = os[3];
  Tape<T>::current()->record(on, [xn, on, taps, B, C, H, W, oh, ow, axis]() {
    xn->ensure_grad();
    const T* gy = on->grad.data();
    T* gx = xn->grad.data();
    for (int64_t p = 0; p < B * C; ++p) {
      const T* gp = gy + p * oh * ow;
      T* xp = gx + p * H * W;
      if (axis == 2) {
        for (int64_t y = 0; y < oh; ++y) {
          const auto& t = taps[size_t(y)];
          for (size_t k = 0; k < t.indices.size(); ++k) {
            T wt = T(t.weights[k]);
            const T* grow = gp + y * ow;
            T* xrow = xp + t.indices[k] * W;
            for (int64_t x = 0; x < ow; ++x) xrow[x] += wt * grow[x];
          }
        }
      } else {
        for (int64_t y = 0; y < H; ++y) {
          const T* grow = gp + y * ow;
          T* xrow = xp + y * W;
          for (int64_t x = 0; x < ow; ++x) {
            const auto& t = taps[size_t(x)];
            for (size_t k = 0; k < t.indices.size(); ++k)
              xrow[t.indices[k]] += T(t.weights[k]) * grow[x];
          }
        }
      }
    }
  });
  return res;
}

// Full bicubic resize of an NCHW tensor (differentiable).
template <class T>
Tensor<T> bicubic_resize_nchw(const Tensor<T>& x, int64_t out_h, int64_t out_w, bool antialias) {
  if (x.dim(2) == out_h && x.dim(3) == out_w) return x;
  auto vt = bicubic_contributions(x.dim(2), out_h, antialias);
  auto ht = bicubic_contributions(x.dim(3), out_w, antialias);
  return resize_axis(resize_axis(x, vt, 2), ht, 3);
}

}  // namespace s2sr
