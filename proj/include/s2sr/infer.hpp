#pragma once

// Inference helpers: plain restoration, 8-transform self-ensemble, tiled
// forward for large inputs, and the two-stage artifact-removal + upscale
// pipeline.

#include "s2sr/checkpoint.hpp"

namespace s2sr {

// Average of the 8 dihedral round trips. Equals a plain forward (within
// float accumulation) for any dihedral-equivariant operator.
template <class T>
Tensor<T> self_ensemble_infer(const Swin2SR<T>& model, const Tensor<T>& lq, int64_t r = 0) {
  Tensor<T> acc;
  std::vector<double> sum;
  for (int op = 0; op < 8; ++op) {
    auto xt = dihedral_apply_nchw(lq, op);
    auto yt = model.forward(xt, r);
    auto y = dihedral_apply_nchw(yt, dihedral_inverse(op));
    if (op == 0) {
      acc = y;
      sum.assign(y.data().begin(), y.data().end());
    } else {
      if (y.shape() != acc.shape()) throw ShapeError("ensemble members disagree on shape");
      for (size_t i = 0; i < sum.size(); ++i) sum[i] += double(y.data()[i]);
    }
  }
  std::vector<T> mean(sum.size());
  for (size_t i = 0; i < sum.size(); ++i) mean[i] = T(sum[i] / 8.0);
  return Tensor<T>(acc.shape(), std::move(mean));
}

// Overlapping-tile forward with uniform blending; falls back to the plain
// forward (bit-exact) when the image fits in one tile.
template <class T>
Tensor<T> tile_infer(const Swin2SR<T>& model, const Tensor<T>& lq, int64_t tile, int64_t overlap,
                     int64_t r = 0) {
  if (tile < model.cfg.window || tile % model.cfg.window != 0)
    throw UsageError("tile must be a positive multiple of the window size");
  if (overlap < 0 || overlap >= tile) throw UsageError("overlap must be in [0, tile)");
  int64_t H = lq.dim(2), W = lq.dim(3);
  if (H <= tile && W <= tile) return model.forward(lq, r);

  int64_t scale = model.cfg.upsampler == Upsampler::dynamic ? r : model.cfg.scale;
  int64_t B = lq.dim(0), C = model.cfg.in_channels;
  Tensor<T> out = Tensor<T>::zeros({B, C, H * scale, W * scale});
  std::vector<int32_t> hits(size_t(H * scale * W * scale), 0);

  int64_t step = tile - overlap;
  auto starts = [&](int64_t len) {
    std::vector<int64_t> s;
    if (len <= tile) {
      s.push_back(0);
      return s;
    }
    for (int64_t v = 0;; v += step) {
      if (v + tile >= len) {
        s.push_back(len - tile);
        break;
      }
      s.push_back(v);
    }
    return s;
  };

  for (int64_t y0 : starts(H))
    for (int64_t x0 : starts(W)) {
      int64_t th = std::min(tile, H), tw = std::min(tile, W);
      auto patch = crop_hw(lq, y0, x0, th, tw);
      auto sr = model.forward(patch, r);
      const T* sp = sr.ptr();
      T* op = out.ptr();
      for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c)
          for (int64_t y = 0; y < th * scale; ++y)
            for (int64_t x = 0; x < tw * scale; ++x) {
              int64_t oy = y0 * scale + y, ox = x0 * scale + x;
              op[((b * C + c) * H * scale + oy) * W * scale + ox] +=
                  sp[((b * C + c) * th * scale + y) * tw * scale + x];
              if (b == 0 && c == 0) ++hits[size_t(oy * W * scale + ox)];
            }
    }

  T* op = out.ptr();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t i = 0; i < H * scale * W * scale; ++i)
        op[(b * C + c) * H * scale * W * scale + i] /= T(hits[size_t(i)]);
  return out;
}

// Stage 1 removes compression artifacts at input resolution (scale-1 model),
// stage 2 upscales. Each stage may independently use the self-ensemble.
template <class T>
Tensor<T> pipeline_ci2(const Swin2SR<T>& stage1, const Swin2SR<T>& stage2, const Tensor<T>& lq,
                       bool ensemble1 = false, bool ensemble2 = false) {
  if (stage1.cfg.scale != 1)
    throw UsageError("CI2 stage 1 must be a scale-1 artifact-removal model");
  if (stage2.cfg.scale == 1 && stage2.cfg.upsampler != Upsampler::dynamic)
    throw UsageError("CI2 stage 2 must upscale");
  auto restored = ensemble1 ? self_ensemble_infer(stage1, lq) : stage1.forward(lq);
  return ensemble2 ? self_ensemble_infer(stage2, restored) : stage2.forward(restored);
}

// Image-level restoration used by the CLI: tensor in [0,1], clamped only at
// export.
inline ImageU8 restore_image(const Swin2SR<float>& model, const ImageU8& lq, bool ensemble,
                             int64_t tile, int64_t overlap, int64_t r = 0) {
  auto x = image_to_tensor<float>(lq);
  Tensor<float> y;
  if (tile > 0)
    y = tile_infer(model, x, tile, overlap, r);
  else if (ensemble)
    y = self_ensemble_infer(model, x, r);
  else
    y = model.forward(x, r);
  return tensor_to_image(y);
}

}  // namespace s2sr
