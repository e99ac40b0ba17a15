#pragma once

// Window machinery for shifted-window attention: partition/reverse between
// the [B,H,W,C] canvas and [nW*B, M*M, C] window batches, cyclic shifts, and
// the additive mask that isolates wrapped regions in shifted layers.

#include "s2sr/ops.hpp"

namespace s2sr {

// [B,H,W,C] -> [nW*B, M^2, C]; windows row-major over the window grid,
// batch-major overall. H and W must already be multiples of M.
template <class T>
Tensor<T> window_partition(const Tensor<T>& x, int64_t M) {
  if (x.rank() != 4) throw ShapeError("window_partition expects [B,H,W,C]");
  int64_t B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  if (H % M != 0 || W % M != 0)
    throw UsageError("window_partition: " + std::to_string(H) + "x" + std::to_string(W) +
                     " not divisible by window " + std::to_string(M) + "; pad first");
  auto v = reshape(x, {B, H / M, M, W / M, M, C});
  auto p = permute(v, {0, 1, 3, 2, 4, 5});
  return reshape(p, {B * (H / M) * (W / M), M * M, C});
}

// Inverse of window_partition.
template <class T>
Tensor<T> window_reverse(const Tensor<T>& wins, int64_t M, int64_t H, int64_t W) {
  if (wins.rank() != 3 || wins.dim(1) != M * M)
    throw ShapeError("window_reverse expects [nW*B, M^2, C]");
  int64_t nW = (H / M) * (W / M);
  if (H % M != 0 || W % M != 0 || wins.dim(0) % nW != 0)
    throw ShapeError("window_reverse geometry mismatch");
  int64_t B = wins.dim(0) / nW;
  int64_t C = wins.dim(2);
  auto v = reshape(wins, {B, H / M, W / M, M, M, C});
  auto p = permute(v, {0, 1, 3, 2, 4, 5});
  return reshape(p, {B, H, W, C});
}

// Torus roll by (-s,-s): content moves up-left; cyclic_shift(x, -s) inverts.
template <class T>
Tensor<T> cyclic_shift(const Tensor<T>& x, int64_t s) {
  int64_t H = x.dim(1), W = x.dim(2);
  if (std::min(H, W) > 0 && (s >= std::min(H, W) || s <= -std::min(H, W)))
    throw UsageError("cyclic shift must satisfy |s| < min(H,W)");
  if (s == 0) return x;
  return roll_hw(x, s, s);
}

// Additive attention bias [nW, M^2, M^2]: 0 for pairs from the same
// pre-shift contiguous region, -100 across regions. All zero when s == 0.
template <class T>
Tensor<T> build_shift_mask(int64_t H, int64_t W, int64_t M, int64_t s) {
  if (s != 0 && s != M / 2) throw UsageError("shift must be 0 or M/2");
  int64_t nWh = H / M, nWw = W / M, nW = nWh * nWw;
  auto mask = Tensor<T>::zeros({nW, M * M, M * M});
  if (s == 0) return mask;

  // Region label per canvas cell from the three slabs
  // [0,-M), [-M,-s), [-s,end) on each axis of the shifted canvas.
  auto slab = [&](int64_t t, int64_t len) {
    if (t < len - M) return int64_t(0);
    if (t < len - s) return int64_t(1);
    return int64_t(2);
  };
  std::vector<int64_t> label(size_t(H * W));
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x) label[size_t(y * W + x)] = slab(y, H) * 3 + slab(x, W);

  T* pm = mask.ptr();
  for (int64_t wy = 0; wy < nWh; ++wy)
    for (int64_t wx = 0; wx < nWw; ++wx) {
      int64_t wi = wy * nWw + wx;
      T* block = pm + wi * M * M * M * M;
      for (int64_t i = 0; i < M * M; ++i) {
        int64_t li = label[size_t((wy * M + i / M) * W + wx * M + i % M)];
        for (int64_t j = 0; j < M * M; ++j) {
          int64_t lj = label[size_t((wy * M + j / M) * W + wx * M + j % M)];
          block[i * M * M + j] = li == lj ? T(0) : T(-100);
        }
      }
    }
  return mask;
}

}  // namespace s2sr
