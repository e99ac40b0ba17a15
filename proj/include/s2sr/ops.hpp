#pragma once

// Differentiable operations on Tensor<T>: elementwise suite, reductions,
// broadcast-aware binary ops, batched matmul, conv2d, layer norm, softmax,
// and the shape/index ops (reshape, permute, pad, crop, roll, gather).
//
// Every op validates shapes before touching data, computes the forward
// result, and registers a backward closure when a tape is active. Backward
// closures accumulate with += so shared subexpressions combine correctly.

#include <algorithm>
#include <cmath>

#include "s2sr/tensor.hpp"

namespace s2sr {

// ---------------------------------------------------------------------------
// Multiply counters. matmul against a rank-2 weight counts as "linear",
// matmul of two batched operands counts as "batched" (attention products),
// conv2d counts as "conv". Elementwise math, norms and softmax are not
// counted. Thread-local so concurrent graphs do not interleave.
struct OpCounters {
  int64_t conv_muls = 0;
  int64_t linear_muls = 0;
  int64_t batched_muls = 0;

  int64_t total() const { return conv_muls + linear_muls + batched_muls; }
  int64_t conv_and_linear() const { return conv_muls + linear_muls; }
  void reset() { conv_muls = linear_muls = batched_muls = 0; }
};

inline OpCounters& op_counters() {
  thread_local OpCounters c;
  return c;
}

// ---------------------------------------------------------------------------
// Broadcasting helpers (numpy rules).

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (size_t i = 0; i < r; ++i) {
    int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      throw ShapeError("shapes not broadcastable: " + shape_str(a) + " vs " + shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `s` viewed as broadcast to `out` (0 on expanded dims).
inline std::vector<int64_t> broadcast_strides(const Shape& s, const Shape& out) {
  std::vector<int64_t> st(out.size(), 0);
  auto own = strides_of(s);
  size_t off = out.size() - s.size();
  for (size_t i = 0; i < s.size(); ++i)
    if (s[i] != 1) st[off + i] = own[i];
  return st;
}

// Walks every output coordinate, calling f(out_flat, a_flat, b_flat).
template <class F>
inline void broadcast_walk(const Shape& out, const std::vector<int64_t>& sa,
                           const std::vector<int64_t>& sb, F&& f) {
  int64_t n = numel_of(out);
  int r = int(out.size());
  std::vector<int64_t> cnt(size_t(r), 0);
  int64_t ia = 0, ib = 0;
  for (int64_t i = 0; i < n; ++i) {
    f(i, ia, ib);
    for (int d = r - 1; d >= 0; --d) {
      ++cnt[size_t(d)];
      ia += sa[size_t(d)];
      ib += sb[size_t(d)];
      if (cnt[size_t(d)] < out[size_t(d)]) break;
      cnt[size_t(d)] = 0;
      ia -= sa[size_t(d)] * out[size_t(d)];
      ib -= sb[size_t(d)] * out[size_t(d)];
    }
  }
}

// Generic broadcast binary op. fwd(a,b) -> value; da(gy,a,b) and db(gy,a,b)
// give the per-element contributions accumulated into each input grad.
template <class T, class Fwd, class Da, class Db>
inline Tensor<T> binary_broadcast_op(const Tensor<T>& a, const Tensor<T>& b, const char* name,
                                     Fwd fwd, Da da, Db db) {
  Shape os = broadcast_shape(a.shape(), b.shape());
  std::vector<T> out(size_t(numel_of(os)));
  const T* pa = a.ptr();
  const T* pb = b.ptr();
  bool same = a.shape() == b.shape();
  std::vector<int64_t> sa, sb;
  if (same) {
    for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(pa[i], pb[i]);
  } else {
    sa = broadcast_strides(a.shape(), os);
    sb = broadcast_strides(b.shape(), os);
    broadcast_walk(os, sa, sb,
                   [&](int64_t i, int64_t ia, int64_t ib) { out[i] = fwd(pa[ia], pb[ib]); });
  }
  Tensor<T> res(os, std::move(out));
  check_finite(res, name);
  if (!tracing<T>({&a, &b})) return res;
  res.set_requires_grad(true);
  auto an = a.node();
  auto bn = b.node();
  auto on = res.node();
  bool need_a = a.requires_grad();
  bool need_b = b.requires_grad();
  Tape<T>::current()->record(on, [an, bn, on, os, sa, sb, same, need_a, need_b, da, db]() {
    const auto& gy = on->grad;
    const T* pa = an->data.data();
    const T* pb = bn->data.data();
    if (need_a) an->ensure_grad();
    if (need_b) bn->ensure_grad();
    if (same) {
      if (need_a) {
        T* ga = an->grad.data();
        for (size_t i = 0; i < gy.size(); ++i) ga[i] += da(gy[i], pa[i], pb[i]);
      }
      if (need_b) {
        T* gb = bn->grad.data();
        for (size_t i = 0; i < gy.size(); ++i) gb[i] += db(gy[i], pa[i], pb[i]);
      }
    } else {
      T* ga = need_a ? an->grad.data() : nullptr;
      T* gb = need_b ? bn->grad.data() : nullptr;
      broadcast_walk(os, sa, sb, [&](int64_t i, int64_t ia, int64_t ib) {
        if (ga) ga[ia] += da(gy[size_t(i)], pa[ia], pb[ib]);
        if (gb) gb[ib] += db(gy[size_t(i)], pa[ia], pb[ib]);
      });
    }
  });
  return res;
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_broadcast_op<T>(
      a, b, "add", [](T x, T y) { return x + y; }, [](T g, T, T) { return g; },
      [](T g, T, T) { return g; });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_broadcast_op<T>(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T g, T, T) { return g; },
      [](T g, T, T) { return -g; });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_broadcast_op<T>(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T g, T, T y) { return g * y; },
      [](T g, T x, T) { return g * x; });
}

template <class T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <class T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <class T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }

// ---------------------------------------------------------------------------
// Unary ops.

template <class T, class Fwd, class Dx>
inline Tensor<T> unary_op(const Tensor<T>& x, const char* name, Fwd fwd, Dx dx) {
  std::vector<T> out(x.data().size());
  const T* px = x.ptr();
  for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(px[i]);
  Tensor<T> res(x.shape(), std::move(out));
  check_finite(res, name);
  if (!tracing<T>({&x})) return res;
  res.set_requires_grad(true);
  auto xn = x.node();
  auto on = res.node();
  Tape<T>::current()->record(on, [xn, on, dx]() {
    xn->ensure_grad();
    const auto& gy = on->grad;
    const T* px = xn->data.data();
    T* gx = xn->grad.data();
    for (size_t i = 0; i < gy.size(); ++i) gx[i] += dx(gy[i], px[i]);
  });
  return res;
}

template <class T>
Tensor<T> neg(const Tensor<T>& x) {
  return unary_op<T>(
      x, "neg", [](T v) { return -v; }, [](T g, T) { return -g; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
  return unary_op<T>(
      x, "add_scalar", [c](T v) { return v + c; }, [](T g, T) { return g; });
}

template <class T>
Tensor<T> mul_scalar(const Tensor<T>& x, T c) {
  return unary_op<T>(
      x, "mul_scalar", [c](T v) { return v * c; }, [c](T g, T) { return g * c; });
}

template <class T>
Tensor<T> exp_op(const Tensor<T>& x) {
  return unary_op<T>(
      x, "exp", [](T v) { return std::exp(v); },
      [](T g, T v) { return g * std::exp(v); });
}

template <class T>
Tensor<T> sqrt_op(const Tensor<T>& x) {
  return unary_op<T>(
      x, "sqrt", [](T v) { return std::sqrt(v); },
      [](T g, T v) { return v > T(0) ? g / (T(2) * std::sqrt(v)) : T(0); });
}

template <class T>
Tensor<T> reciprocal(const Tensor<T>& x) {
  return unary_op<T>(
      x, "reciprocal", [](T v) { return T(1) / v; },
      [](T g, T v) { return -g / (v * v); });
}

template <class T>
Tensor<T> abs_op(const Tensor<T>& x) {
  // subgradient at 0 is 0
  return unary_op<T>(
      x, "abs", [](T v) { return std::fabs(v); },
      [](T g, T v) { return v > T(0) ? g : (v < T(0) ? -g : T(0)); });
}

// Exact erf form.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  return unary_op<T>(
      x, "gelu",
      [](T v) { return T(0.5) * v * T(1.0 + std::erf(double(v) * inv_sqrt2)); },
      [](T g, T v) {
        double cdf = 0.5 * (1.0 + std::erf(double(v) * inv_sqrt2));
        double pdf = inv_sqrt2pi * std::exp(-0.5 * double(v) * double(v));
        return T(double(g) * (cdf + double(v) * pdf));
      });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary_op<T>(
      x, "sigmoid",
      [](T v) { return T(1) / (T(1) + std::exp(-v)); },
      [](T g, T v) {
        T s = T(1) / (T(1) + std::exp(-v));
        return g * s * (T(1) - s);
      });
}

// sign(x) * ln(1 + |x|)
template <class T>
Tensor<T> sign_log1p(const Tensor<T>& x) {
  return unary_op<T>(
      x, "sign_log1p",
      [](T v) { return T(v >= T(0) ? std::log1p(double(v)) : -std::log1p(double(-v))); },
      [](T g, T v) { return g / (T(1) + std::fabs(v)); });
}

// Gradient is 1 inside [lo, hi] (inclusive), 0 outside.
template <class T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
  return unary_op<T>(
      x, "clamp",
      [lo, hi](T v) { return std::min(std::max(v, lo), hi); },
      [lo, hi](T g, T v) { return (v >= lo && v <= hi) ? g : T(0); });
}

template <class T>
Tensor<T> clamp_min(const Tensor<T>& x, T lo) {
  return unary_op<T>(
      x, "clamp_min", [lo](T v) { return std::max(v, lo); },
      [lo](T g, T v) { return v >= lo ? g : T(0); });
}

template <class T>
Tensor<T> clamp_max(const Tensor<T>& x, T hi) {
  return unary_op<T>(
      x, "clamp_max", [hi](T v) { return std::min(v, hi); },
      [hi](T g, T v) { return v <= hi ? g : T(0); });
}

// ---------------------------------------------------------------------------
// Reductions.

template <class T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  bool traced = tracing<T>({&x});
  if (!traced) return Tensor<T>::scalar(acc);
  Tensor<T> res = Tensor<T>::scalar(acc);
  res.set_requires_grad(true);
  auto xn = x.node();
  auto on = res.node();
  Tape<T>::current()->record(on, [xn, on]() {
    xn->ensure_grad();
    T g = on->grad[0];
    for (auto& v : xn->grad) v += g;
  });
  return res;
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& x) {
  return mul_scalar(sum_all(x), T(1) / T(x.numel()));
}

// L1 reduction: mean of absolute values.
template <class T>
Tensor<T> mean_abs(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += std::fabs(v);
  T scale = T(1) / T(x.numel());
  bool traced = tracing<T>({&x});
  if (!traced) return Tensor<T>::scalar(acc * scale);
  Tensor<T> res = Tensor<T>::scalar(acc * scale);
  res.set_requires_grad(true);
  auto xn = x.node();
  auto on = res.node();
  Tape<T>::current()->record(on, [xn, on, scale]() {
    xn->ensure_grad();
    T g = on->grad[0] * scale;
    const T* px = xn->data.data();
    T* gx = xn->grad.data();
    for (size_t i = 0; i < xn->data.size(); ++i)
      gx[i] += px[i] > T(0) ? g : (px[i] < T(0) ? -g : T(0));
  });
  return res;
}

// Sum over the last axis, keeping it as size 1.
template <class T>
Tensor<T> sum_lastdim(const Tensor<T>& x) {
  if (x.rank() < 1) throw ShapeError("sum_lastdim needs rank >= 1");
  int64_t c = x.dim(-1);
  int64_t rows = x.numel() / c;
  Shape os = x.shape();
  os.back() = 1;
  std::vector<T> out(static_cast<size_t>(rows));
  const T* px = x.ptr();
  for (int64_t r = 0; r < rows; ++r) {
    T acc = 0;
    for (int64_t j = 0; j < c; ++j) acc += px[r * c + j];
    out[size_t(r)] = acc;
  }
  bool traced = tracing<T>({&x});
  if (!traced) return Tensor<T>(os, std::move(out));
  Tensor<T> res(os, std::move(out));
  res.set_requires_grad(true);
  auto xn = x.node();
  auto on = res.node();
  Tape<T>::current()->record(on, [xn, on, rows, c]() {
    xn->ensure_grad();
    const T* gy = on->grad.data();
    T* gx = xn->grad.data();
    for (int64_t r = 0; r < rows; ++r) {
      T g = gy[r];
      for (int64_t j = 0; j < c; ++j) gx[r * c + j] += g;
    }
  });
  return res;
}

// ---------------------------------------------------------------------------
// Shape ops.

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape s) {
  if (numel_of(s) != x.numel())
    throw ShapeError("reshape " + shape_str(x.shape()) + " -> " + shape_str(s) +
                     " changes element count");
  std::vector<T> out = x.data();
  bool traced = tracing<T>({&x});
  if (!traced) return Tensor<T>(std::move(s), std::move(out));
  Tensor<T> res(std::move(s), std::move(out));
  res.set_requires_grad(true);
  auto xn = x.node();
  auto on = res.node();
  Tape<T>::current()->record(on, [xn, on]() {
    xn->ensure_grad();
    const auto& gy = on->grad;
    T* gx = xn->grad.data();
    for (size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
  });
  return res;
}

namespace detail {

// Dot product with independent partial sums so the compiler can vectorize
// the reduction without reassociation flags. Lane order is fixed, so results
// are reproducible run to run.
template <class T>
inline T dotv(const T* a, const T* b, int64_t n) {
  T acc[8] = {};
  int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (int u = 0; u < 8; ++u) acc[u] += a[i + u] * b[i + u];
  T tail = 0;
  for (; i < n; ++i) tail += a[i] * b[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

// Walks the permuted output in order; f(out_flat, in_flat).
template <class F>
inline void permute_walk(const Shape& in_shape, const std::vector<int>& axes, F&& f) {
  int r = int(in_shape.size());
  Shape out_shape(static_cast<size_t>(r));
  auto in_strides = strides_of(in_shape);
  std::vector<int64_t> step(static_cast<size_t>(r));
  for (int d = 0; d < r; ++d) {
    out_shape[size_t(d)] = in_shape[size_t(axes[size_t(d)])];
    step[size_t(d)] = in_strides[size_t(axes[size_t(d)])];
  }
  int64_t n = numel_of(out_shape);
  std::vector<int64_t> cnt(size_t(r), 0);
  int64_t src = 0;
  for (int64_t i = 0; i < n; ++i) {
    f(i, src);
    for (int d = r - 1; d >= 0; --d) {
      ++cnt[size_t(d)];
      src += step[size_t(d)];
      if (cnt[size_t(d)] < out_shape[size_t(d)]) break;
      cnt[size_t(d)] = 0;
      src -= step[size_t(d)] * out_shape[size_t(d)];
    }
  }
}

}  // namespace detail

template <class T>
Tensor<T> permute(const Tensor<T>& x, std::vector<int> axes) {
  if (int(axes.size()) != x.rank()) throw ShapeError("permute axes rank mismatch");
  std::vector<bool> seen(axes.size(), false);
  Shape os(axes.size());
  for (size_t d = 0; d < axes.size(); ++d) {
    if (axes[d] < 0 || axes[d] >= x.rank() || seen[size_t(axes[d])])
      throw ShapeError("invalid permutation");
    seen[size_t(axes[d])] = true;
    os[d] = x.shape()[size_t(axes[d])];
  }
  std::vector<T> out(x.data().size());
  const T* px = x.ptr();
  detail::permute_walk(x.shape(), axes, [&](int64_t dst, int64_t src) { out[size_t(dst)] = px[src]; });
  bool traced = tracing<T>({&x});
  if (!traced) return Tensor<T>(std::move(os), std::move(out));
  Tensor<T> res(std::move(os), std::move(out));
  res.set_requires_grad(true);
  auto xn = x.node();
  auto on = res.node();
  Shape in_shape = x.shape();
  Tape<T>::current()->record(on, [xn, on, in_shape, axes]() {
    xn->ensure_grad();
    const T* gy = on->grad.data();
    T* gx = xn->grad.data();
    detail::permute_walk(in_shape, axes, [&](int64_t dst, int64_t src) { gx[src] += gy[dst]; });
  });
  return res;
}

// Cyclic roll of the H and W axes of a [B,H,W,C] tensor; shift (dy,dx) moves
// content so out[y][x] = in[(y+dy) mod H][(x+dx) mod W].
template <class T>
Tensor<T> roll_hw(const Tensor<T>& x, int64_t dy, int64_t dx) {
  if (x.rank() != 4) throw ShapeError("roll_hw expects [B,H,W,C]");
  int64_t B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  auto m = [](int64_t v, int64_t n) { return ((v % n) + n) % n; };
  dy = m(dy, H);
  dx = m(dx, W);
  std::vector<T> out(x.data().size());
  const T* px = x.ptr();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t y = 0; y < H; ++y) {
      const T* src_row = px + ((b * H + m(y + dy, H)) * W) * C;
      T* dst_row = out.data() + ((b * H + y) * W) * C;
      int64_t first = W - dx;  // out[0..first) = src[dx..W)
      std::memcpy(dst_row, src_row + dx * C, size_t(first * C) * sizeof(T));
      std::memcpy(dst_row + first * C, src_row, size_t(dx * C) * sizeof(T));
    }
  bool traced = tracing<T>({&x});
  if (!traced) return Tensor<T>(x.shape(), std::move(out));
  Tensor<T> res(x.shape(), std::move(out));
  res.set_requires_grad(true);
  auto xn = x.node();
  auto on = res.node();
  Tape<T>::current()->record(on, [xn, on, B, H, W, C, dy, dx]() {
    xn->ensure_grad();
    auto m = [](int64_t v, int64_t n) { return ((v % n) + n) % n; };
    const T* gy = on->grad.data();
    T* gx = xn->grad.data();
    for (int64_t b = 0; b < B; ++b)
      for (int64_t y = 0; y < H; ++y) {
        T* dst_row = gx + ((b * H + m(y + dy, H)) * W) * C;
        const T* src_row = gy + ((b * H + y) * W) * C;
        for (int64_t xcol = 0; xcol < W; ++xcol) {
          T* d = dst_row + m(xcol + dx, W) * C;
          const T* s = src_row + xcol * C;
          for (int64_t c = 0; c < C; ++c) d[c] += s[c];
        }
      }
  });
  return res;
}

// Reflection padding (borders mirrored excluding the edge sample) on the
// spatial axes of [B,C,H,W]. Pad must be smaller than the padded dimension.
template <class T>
Tensor<T> reflect_pad_hw(const Tensor<T>& x, int64_t top, int64_t bottom, int64_t left,
                         int64_t right) {
  if (x.rank() != 4) throw ShapeError("reflect_pad_hw expects [B,C,H,W]");
  int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (top >= H || bottom >= H || left >= W || right >= W)
    throw UsageError("reflection pad must be smaller than the image dimension");
  int64_t Ho = H + top + bottom, Wo = W + left + right;
  auto refl = [](int64_t i, int64_t n) {
    if (i < 0) return -i;
    if (i >= n) return 2 * n - 2 - i;
    return i;
  };
  std::vector<T> out(size_t(B * C * Ho * Wo));
  const T* px = x.ptr();
  for (int64_t bc = 0; bc < B * C; ++bc) {
    const T* in_plane = px + bc * H * W;
    T* out_plane = out.data() + bc * Ho * Wo;
    for (int64_t y = 0; y < Ho; ++y) {
      int64_t sy = refl(y - top, H);
      for (int64_t xo = 0; xo < Wo; ++xo)
        out_plane[y * Wo + xo] = in_plane[sy * W + refl(xo - left, W)];
    }
  }
  Shape os{B, C, Ho, Wo};
  bool traced = tracing<T>({&x});
  if (!traced) return Tensor<T>(std::move(os), std::move(out));
  Tensor<T> res(std::move(os), std::move(out));
  res.set_requires_grad(true);
  auto xn = x.node();
  auto on = res.node();
  Tape<T>::current()->record(on, [xn, on, B, C, H, W, Ho, Wo, top, left]() {
    xn->ensure_grad();
    auto refl = [](int64_t i, int64_t n) {
      if (i < 0) return -i;
      if (i >= n) return 2 * n - 2 - i;
      return i;
    };
    const T* gy = on->grad.data();
    T* gx = xn->grad.data();
    for (int64_t bc = 0; bc < B * C; ++bc) {
      T* in_plane = gx + bc * H * W;
      const T* out_plane = gy + bc * Ho * Wo;
      for (int64_t y = 0; y < Ho; ++y) {
        int64_t sy = refl(y - top, H);
        for (int64_t xo = 0; xo < Wo; ++xo)
          in_plane[sy * W + refl(xo - left, W)] += out_plane[y * Wo + xo];
      }
    }
  });
  return res;
}

// Spatial crop of [B,C,H,W].
template <class T>
Tensor<T> crop_hw(const Tensor<T>& x, int64_t top, int64_t left, int64_t h, int64_t w) {
  if (x.rank() != 4) throw ShapeError("crop_hw expects [B,C,H,W]");
  int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (top < 0 || left < 0 || top + h > H || left + w > W)
    throw ShapeError("crop window out of bounds");
  std::vector<T> out(size_t(B * C * h * w));
  const T* px = x.ptr();
  for (int64_t bc = 0; bc < B * C; ++bc)
    for (int64_t y = 0; y < h; ++y)
      std::memcpy(out.data() + (bc * h + y) * w, px + (bc * H + top + y) * W + left,
                  size_t(w) * sizeof(T));
  Shape os{B, C, h, w};
  bool traced = tracing<T>({&x});
  if (!traced) return Tensor<T>(std::move(os), std::move(out));
  Tensor<T> res(std::move(os), std::move(out));
  res.set_requires_grad(true);
  auto xn = x.node();
  auto on = res.node();
  Tape<T>::current()->record(on, [xn, on, B, C, H, W, h, w, top, left]() {
    xn->ensure_grad();
    const T* gy = on->grad.data();
    T* gx = xn->grad.data();
    for (int64_t bc = 0; bc < B * C; ++bc)
      for (int64_t y = 0; y < h; ++y) {
        const T* s = gy + (bc * h + y) * w;
        T* d = gx + (bc * H + top + y) * W + left;
        for (int64_t xo = 0; xo < w; ++xo) d[xo] += s[xo];
      }
  });
  return res;
}

// y[i, ...] = x[idx[i], ...]; indices may repeat, backward scatter-adds.
template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, std::vector<int64_t> idx) {
  if (x.rank() < 1) throw ShapeError("gather_rows needs rank >= 1");
  int64_t n = x.dim(0);
  int64_t row = x.numel() / n;
  for (int64_t i : idx)
    if (i < 0 || i >= n) throw ShapeError("gather index out of range");
  Shape os = x.shape();
  os[0] = int64_t(idx.size());
  std::vector<T> out(size_t(int64_t(idx.size()) * row));
  const T* px = x.ptr();
  for (size_t i = 0; i < idx.size(); ++i)
    std::memcpy(out.data() + int64_t(i) * row, px + idx[i] * row, size_t(row) * sizeof(T));
  bool traced = tracing<T>({&x});
  if (!traced) return Tensor<T>(std::move(os), std::move(out));
  Tensor<T> res(std::move(os), std::move(out));
  res.set_requires_grad(true);
  auto xn = x.node();
  auto on = res.node();
  Tape<T>::current()->record(on, [xn, on, idx, row]() {
    xn->ensure_grad();
    const T* gy = on->grad.data();
    T* gx = xn->grad.data();
    for (size_t i = 0; i < idx.size(); ++i) {
      const T* s = gy + int64_t(i) * row;
      T* d = gx + idx[i] * row;
      for (int64_t j = 0; j < row; ++j) d[j] += s[j];
    }
  });
  return res;
}

// ---------------------------------------------------------------------------
// Batched matrix multiply with broadcast over leading batch dims.
// a: [..., m, k], b: [..., k, n] -> [..., m, n].

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2) throw ShapeError("matmul needs rank >= 2 operands");
  int64_t m = a.dim(-2), k = a.dim(-1);
  int64_t kb = b.dim(-2), n = b.dim(-1);
  if (k != kb)
    throw ShapeError("matmul inner dimensions differ: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  Shape abatch(a.shape().begin(), a.shape().end() - 2);
  Shape bbatch(b.shape().begin(), b.shape().end() - 2);
  Shape obatch = broadcast_shape(abatch, bbatch);
  Shape os = obatch;
  os.push_back(m);
  os.push_back(n);

  int64_t nbatch = numel_of(obatch);
  auto sa = broadcast_strides(abatch, obatch);
  auto sb = broadcast_strides(bbatch, obatch);
  // batch index -> flat offset of the [m,k] / [k,n] slice
  auto batch_offsets = [&](std::vector<int64_t>& offa, std::vector<int64_t>& offb) {
    offa.resize(size_t(nbatch));
    offb.resize(size_t(nbatch));
    broadcast_walk(obatch, sa, sb, [&](int64_t i, int64_t ia, int64_t ib) {
      offa[size_t(i)] = ia * m * k;
      offb[size_t(i)] = ib * k * n;
    });
    if (nbatch == 0) return;
  };
  std::vector<int64_t> offa, offb;
  if (obatch.empty()) {
    offa = {0};
    offb = {0};
  } else {
    batch_offsets(offa, offb);
  }

  {
    auto& ctr = op_counters();
    int64_t muls = nbatch * m * k * n;
    if (b.rank() == 2)
      ctr.linear_muls += muls;
    else
      ctr.batched_muls += muls;
  }

  std::vector<T> out(size_t(nbatch * m * n), T(0));
  const T* pa = a.ptr();
  const T* pb = b.ptr();
  for (int64_t bi = 0; bi < nbatch; ++bi) {
    const T* A = pa + offa[size_t(bi)];
    const T* B = pb + offb[size_t(bi)];
    T* C = out.data() + bi * m * n;
    for (int64_t i = 0; i < m; ++i) {
      const T* Arow = A + i * k;
      T* Crow = C + i * n;
      for (int64_t kk = 0; kk < k; ++kk) {
        T av = Arow[kk];
        const T* Brow = B + kk * n;
        for (int64_t j = 0; j < n; ++j) Crow[j] += av * Brow[j];
      }
    }
  }

  Tensor<T> res(std::move(os), std::move(out));
  check_finite(res, "matmul");
  if (!tracing<T>({&a, &b})) return res;
  res.set_requires_grad(true);
  auto an = a.node();
  auto bn = b.node();
  auto on = res.node();
  bool need_a = a.requires_grad();
  bool need_b = b.requires_grad();
  Tape<T>::current()->record(on, [an, bn, on, offa, offb, nbatch, m, k, n, need_a, need_b]() {
    const T* pa = an->data.data();
    const T* pb = bn->data.data();
    const T* gy = on->grad.data();
    if (need_a) an->ensure_grad();
    if (need_b) bn->ensure_grad();
    for (int64_t bi = 0; bi < nbatch; ++bi) {
      const T* A = pa + offa[size_t(bi)];
      const T* B = pb + offb[size_t(bi)];
      const T* G = gy + bi * m * n;
      if (need_a) {
        T* gA = an->grad.data() + offa[size_t(bi)];
        // gA[i,kk] += dot(G[i,:], B[kk,:])
        for (int64_t i = 0; i < m; ++i) {
          const T* Grow = G + i * n;
          T* gArow = gA + i * k;
          for (int64_t kk = 0; kk < k; ++kk)
            gArow[kk] += detail::dotv(Grow, B + kk * n, n);
        }
      }
      if (need_b) {
        T* gB = bn->grad.data() + offb[size_t(bi)];
        // gB[kk,:] += A[i,kk] * G[i,:]
        for (int64_t i = 0; i < m; ++i) {
          const T* Arow = A + i * k;
          const T* Grow = G + i * n;
          for (int64_t kk = 0; kk < k; ++kk) {
            T av = Arow[kk];
            if (av == T(0)) continue;
            T* gBrow = gB + kk * n;
            for (int64_t j = 0; j < n; ++j) gBrow[j] += av * Grow[j];
          }
        }
      }
    }
  });
  return res;
}

// ---------------------------------------------------------------------------
// 2-D cross-correlation, NCHW, stride 1, zero padding.
// x: [B,Cin,H,W], w: [Cout,Cin,kh,kw], bias: [Cout] (optional, pass
// undefined Tensor to skip).

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int64_t pad) {
  if (x.rank() != 4 || w.rank() != 4) throw ShapeError("conv2d expects 4-D input and kernel");
  int64_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  int64_t Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != Cin)
    throw ShapeError("conv2d channel mismatch: input has " + std::to_string(Cin) +
                     ", kernel expects " + std::to_string(w.dim(1)));
  if (kh % 2 == 0 || kw % 2 == 0) throw ShapeError("conv2d kernel dims must be odd");
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != Cout))
    throw ShapeError("conv2d bias must be [Cout]");
  int64_t Ho = H + 2 * pad - kh + 1, Wo = W + 2 * pad - kw + 1;
  if (Ho < 1 || Wo < 1) throw ShapeError("conv2d output would be empty");

  op_counters().conv_muls += B * Cout * Ho * Wo * Cin * kh * kw;

  std::vector<T> out(size_t(B * Cout * Ho * Wo), T(0));
  const T* px = x.ptr();
  const T* pw = w.ptr();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t co = 0; co < Cout; ++co) {
      T* out_plane = out.data() + (b * Cout + co) * Ho * Wo;
      if (bias.defined()) {
        T bv = bias.ptr()[co];
        for (int64_t i = 0; i < Ho * Wo; ++i) out_plane[i] = bv;
      }
      for (int64_t ci = 0; ci < Cin; ++ci) {
        const T* in_plane = px + (b * Cin + ci) * H * W;
        for (int64_t ky = 0; ky < kh; ++ky)
          for (int64_t kx = 0; kx < kw; ++kx) {
            T wv = pw[((co * Cin + ci) * kh + ky) * kw + kx];
            if (wv == T(0)) continue;
            for (int64_t oy = 0; oy < Ho; ++oy) {
              int64_t iy = oy + ky - pad;
              if (iy < 0 || iy >= H) continue;
              int64_t x0 = std::max<int64_t>(0, pad - kx);
              int64_t x1 = std::min<int64_t>(Wo, W + pad - kx);
              const T* irow = in_plane + iy * W + (x0 + kx - pad);
              T* orow = out_plane + oy * Wo + x0;
              for (int64_t i = 0; i < x1 - x0; ++i) orow[i] += wv * irow[i];
            }
          }
      }
    }

  Shape os{B, Cout, Ho, Wo};
  Tensor<T> res(std::move(os), std::move(out));
  check_finite(res, "conv2d");
  if (!tracing<T>({&x, &w, &bias})) return res;
  res.set_requires_grad(true);
  auto xn = x.node();
  auto wn = w.node();
  auto biasn = bias.defined() ? bias.node() : nullptr;
  auto on = res.node();
  bool need_x = x.requires_grad();
  bool need_w = w.requires_grad();
  bool need_b = bias.defined() && bias.requires_grad();
  Tape<T>::current()->record(on, [xn, wn, biasn, on, B, Cin, Cout, H, W, Ho, Wo, kh, kw, pad,
                                  need_x, need_w, need_b]() {
    const T* px = xn->data.data();
    const T* pw = wn->data.data();
    const T* gy = on->grad.data();
    if (need_x) xn->ensure_grad();
    if (need_w) wn->ensure_grad();
    if (need_b) biasn->ensure_grad();
    if (need_b) {
      T* gb = biasn->grad.data();
      for (int64_t b = 0; b < B; ++b)
        for (int64_t co = 0; co < Cout; ++co) {
          const T* g_plane = gy + (b * Cout + co) * Ho * Wo;
          T acc = 0;
          for (int64_t i = 0; i < Ho * Wo; ++i) acc += g_plane[i];
          gb[co] += acc;
        }
    }
    for (int64_t b = 0; b < B; ++b)
      for (int64_t co = 0; co < Cout; ++co) {
        const T* g_plane = gy + (b * Cout + co) * Ho * Wo;
        for (int64_t ci = 0; ci < Cin; ++ci) {
          const T* in_plane = px + (b * Cin + ci) * H * W;
          T* gx_plane = need_x ? xn->grad.data() + (b * Cin + ci) * H * W : nullptr;
          for (int64_t ky = 0; ky < kh; ++ky)
            for (int64_t kx = 0; kx < kw; ++kx) {
              int64_t widx = ((co * Cin + ci) * kh + ky) * kw + kx;
              T wv = pw[widx];
              T wacc = 0;
              for (int64_t oy = 0; oy < Ho; ++oy) {
                int64_t iy = oy + ky - pad;
                if (iy < 0 || iy >= H) continue;
                int64_t x0 = std::max<int64_t>(0, pad - kx);
                int64_t x1 = std::min<int64_t>(Wo, W + pad - kx);
                const T* grow = g_plane + oy * Wo + x0;
                const T* irow = in_plane + iy * W + (x0 + kx - pad);
                if (need_w) wacc += detail::dotv(grow, irow, x1 - x0);
                if (need_x) {
                  T* gxrow = gx_plane + iy * W + (x0 + kx - pad);
                  for (int64_t i = 0; i < x1 - x0; ++i) gxrow[i] += wv * grow[i];
                }
              }
              if (need_w) wn->grad[size_t(widx)] += wacc;
            }
        }
      }
  });
  return res;
}

// Depthwise valid-mode correlation with one fixed (non-learnable) 2-D kernel
// shared by all channels. Used by the high-frequency loss blur.
template <class T>
Tensor<T> depthwise_conv2d_fixed(const Tensor<T>& x, const std::vector<T>& kernel, int64_t kh,
                                 int64_t kw) {
  if (x.rank() != 4) throw ShapeError("depthwise_conv2d_fixed expects [B,C,H,W]");
  if (int64_t(kernel.size()) != kh * kw) throw ShapeError("kernel size mismatch");
  int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  int64_t Ho = H - kh + 1, Wo = W - kw + 1;
  if (Ho < 1 || Wo < 1) throw ShapeError("depthwise conv output would be empty");
  std::vector<T> out(size_t(B * C * Ho * Wo), T(0));
  const T* px = x.ptr();
  for (int64_t bc = 0; bc < B * C; ++bc) {
    const T* in_plane = px + bc * H * W;
    T* out_plane = out.data() + bc * Ho * Wo;
    for (int64_t ky = 0; ky < kh; ++ky)
      for (int64_t kx = 0; kx < kw; ++kx) {
        T kv = kernel[size_t(ky * kw + kx)];
        for (int64_t oy = 0; oy < Ho; ++oy) {
          const T* irow = in_plane + (oy + ky) * W + kx;
          T* orow = out_plane + oy * Wo;
          for (int64_t ox = 0; ox < Wo; ++ox) orow[ox] += kv * irow[ox];
        }
      }
  }
  Shape os{B, C, Ho, Wo};
  bool traced = tracing<T>({&x});
  if (!traced) return Tensor<T>(std::move(os), std::move(out));
  Tensor<T> res(std::move(os), std::move(out));
  res.set_requires_grad(true);
  auto xn = x.node();
  auto on = res.node();
  Tape<T>::current()->record(on, [xn, on, kernel, B, C, H, W, Ho, Wo, kh, kw]() {
    xn->ensure_grad();
    const T* gy = on->grad.data();
    T* gx = xn->grad.data();
    for (int64_t bc = 0; bc < B * C; ++bc) {
      T* gx_plane = gx + bc * H * W;
      const T* g_plane = gy + bc * Ho * Wo;
      for (int64_t ky = 0; ky < kh; ++ky)
        for (int64_t kx = 0; kx < kw; ++kx) {
          T kv = kernel[size_t(ky * kw + kx)];
          for (int64_t oy = 0; oy < Ho; ++oy) {
            T* gxrow = gx_plane + (oy + ky) * W + kx;
            const T* grow = g_plane + oy * Wo;
            for (int64_t ox = 0; ox < Wo; ++ox) gxrow[ox] += kv * grow[ox];
          }
        }
    }
  });
  return res;
}

// ---------------------------------------------------------------------------
// Layer norm over the last axis: per-token mean 0 / var 1, then affine.

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  if (eps <= T(0)) throw UsageError("layer_norm eps must be > 0");
  int64_t C = x.dim(-1);
  if (gamma.numel() != C || beta.numel() != C)
    throw ShapeError("layer_norm affine params must have length " + std::to_string(C));
  int64_t rows = x.numel() / C;
  std::vector<T> out(x.data().size());
  std::vector<T> xhat(x.data().size());
  std::vector<T> istd(static_cast<size_t>(rows));
  const T* px = x.ptr();
  const T* pg = gamma.ptr();
  const T* pbt = beta.ptr();
  for (int64_t r = 0; r < rows; ++r) {
    const T* row = px + r * C;
    T mean = 0;
    for (int64_t j = 0; j < C; ++j) mean += row[j];
    mean /= T(C);
    T var = 0;
    for (int64_t j = 0; j < C; ++j) {
      T d = row[j] - mean;
      var += d * d;
    }
    var /= T(C);
    T is = T(1) / std::sqrt(var + eps);
    istd[size_t(r)] = is;
    for (int64_t j = 0; j < C; ++j) {
      T xh = (row[j] - mean) * is;
      xhat[size_t(r * C + j)] = xh;
      out[size_t(r * C + j)] = xh * pg[j] + pbt[j];
    }
  }
  bool traced = tracing<T>({&x, &gamma, &beta});
  if (!traced) return Tensor<T>(x.shape(), std::move(out));
  Tensor<T> res(x.shape(), std::move(out));
  res.set_requires_grad(true);
  auto xn = x.node();
  auto gn = gamma.node();
  auto bn = beta.node();
  auto on = res.node();
  bool need_x = x.requires_grad();
  bool need_g = gamma.requires_grad();
  bool need_b = beta.requires_grad();
  Tape<T>::current()->record(on, [xn, gn, bn, on, xhat = std::move(xhat), istd = std::move(istd),
                                  rows, C, need_x, need_g, need_b]() {
    const T* gy = on->grad.data();
    const T* pg = gn->data.data();
    if (need_x) xn->ensure_grad();
    if (need_g) gn->ensure_grad();
    if (need_b) bn->ensure_grad();
    for (int64_t r = 0; r < rows; ++r) {
      const T* gyr = gy + r * C;
      const T* xh = xhat.data() + r * C;
      if (need_g || need_b) {
        for (int64_t j = 0; j < C; ++j) {
          if (need_g) gn->grad[size_t(j)] += gyr[j] * xh[j];
          if (need_b) bn->grad[size_t(j)] += gyr[j];
        }
      }
      if (need_x) {
        T sum_h = 0, sum_hx = 0;
        for (int64_t j = 0; j < C; ++j) {
          T h = gyr[j] * pg[j];
          sum_h += h;
          sum_hx += h * xh[j];
        }
        T mh = sum_h / T(C), mhx = sum_hx / T(C);
        T is = istd[size_t(r)];
        T* gxr = xn->grad.data() + r * C;
        for (int64_t j = 0; j < C; ++j)
          gxr[j] += is * (gyr[j] * pg[j] - mh - xh[j] * mhx);
      }
    }
  });
  return res;
}

// ---------------------------------------------------------------------------
// Numerically stabilized softmax over the last axis.

template <class T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  int64_t C = x.dim(-1);
  int64_t rows = x.numel() / C;
  std::vector<T> out(x.data().size());
  const T* px = x.ptr();
  for (int64_t r = 0; r < rows; ++r) {
    const T* row = px + r * C;
    T* orow = out.data() + r * C;
    T mx = row[0];
    for (int64_t j = 1; j < C; ++j) mx = std::max(mx, row[j]);
    T sum = 0;
    for (int64_t j = 0; j < C; ++j) {
      T e = std::exp(row[j] - mx);
      orow[j] = e;
      sum += e;
    }
    T inv = T(1) / sum;
    for (int64_t j = 0; j < C; ++j) orow[j] *= inv;
  }
  bool traced = tracing<T>({&x});
  if (!traced) return Tensor<T>(x.shape(), std::move(out));
  Tensor<T> res(x.shape(), std::move(out));
  res.set_requires_grad(true);
  auto xn = x.node();
  auto on = res.node();
  Tape<T>::current()->record(on, [xn, on, rows, C]() {
    xn->ensure_grad();
    const T* gy = on->grad.data();
    const T* y = on->data.data();
    T* gx = xn->grad.data();
    for (int64_t r = 0; r < rows; ++r) {
      const T* gyr = gy + r * C;
      const T* yr = y + r * C;
      T dot = 0;
      for (int64_t j = 0; j < C; ++j) dot += gyr[j] * yr[j];
      T* gxr = gx + r * C;
      for (int64_t j = 0; j < C; ++j) gxr[j] += yr[j] * (gyr[j] - dot);
    }
  });
  return res;
}

// Scalar-root reverse pass over the active tape.
template <class T>
void backward(const Tensor<T>& root) {
  Tape<T>* t = Tape<T>::current();
  if (!t) throw UsageError("backward called with no active tape");
  t->backward(root);
}

}  // namespace s2sr
