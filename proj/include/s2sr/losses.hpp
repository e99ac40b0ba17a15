#pragma once

// Training objectives: plain L1, the downsampled-consistency auxiliary loss,
// and the high-frequency loss built on a fixed 5x5 Gaussian blur.

#include "s2sr/bicubic.hpp"

namespace s2sr {

// Separable 5x5 Gaussian, weights normalized to sum 1.
struct BlurKernel5 {
  double sigma;
  std::vector<double> taps;  // 25, row-major

  explicit BlurKernel5(double sigma_ = 1.0) : sigma(sigma_), taps(25) {
    if (sigma <= 0) throw UsageError("blur sigma must be positive");
    double g[5], s = 0;
    for (int i = 0; i < 5; ++i) {
      double d = double(i) - 2.0;
      g[i] = std::exp(-d * d / (2.0 * sigma * sigma));
      s += g[i];
    }
    for (auto& v : g) v /= s;
    for (int y = 0; y < 5; ++y)
      for (int x = 0; x < 5; ++x) taps[size_t(y * 5 + x)] = g[y] * g[x];
  }
};

template <class T>
Tensor<T> l1_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape())
    throw ShapeError("l1_loss shape mismatch: " + shape_str(pred.shape()) + " vs " +
                     shape_str(target.shape()));
  return mean_abs(sub(pred, target));
}

// L1 between the bicubic (antialiased) r-fold downsamples of prediction and
// reference. The downsampling operator matches the data pipeline.
template <class T>
Tensor<T> aux_loss(const Tensor<T>& pred, const Tensor<T>& target, int64_t r) {
  if (pred.shape() != target.shape()) throw ShapeError("aux_loss shape mismatch");
  if (pred.rank() != 4) throw ShapeError("aux_loss expects [B,C,H,W]");
  if (r < 1) throw UsageError("aux_loss scale must be >= 1");
  int64_t oh = pred.dim(2) / r, ow = pred.dim(3) / r;
  if (oh < 1 || ow < 1) throw UsageError("aux_loss scale larger than the image");
  auto dp = bicubic_resize_nchw(pred, oh, ow, true);
  auto dt = bicubic_resize_nchw(target, oh, ow, true);
  return mean_abs(sub(dp, dt));
}

// Blur with reflect borders; HF(z) = z - blur(z).
template <class T>
Tensor<T> blur5(const Tensor<T>& x, const BlurKernel5& k) {
  std::vector<T> taps(k.taps.begin(), k.taps.end());
  return depthwise_conv2d_fixed(reflect_pad_hw(x, 2, 2, 2, 2), taps, 5, 5);
}

template <class T>
Tensor<T> hf_loss(const Tensor<T>& pred, const Tensor<T>& target, const BlurKernel5& k) {
  if (pred.shape() != target.shape()) throw ShapeError("hf_loss shape mismatch");
  auto hf_pred = sub(pred, blur5(pred, k));
  auto hf_target = sub(target, blur5(target, k));
  return mean_abs(sub(hf_target, hf_pred));
}

// L1 + lambda_aux * aux + lambda_hf * hf. Zero weights skip the respective
// term entirely, so a zero-weight run is bit-identical to plain L1.
template <class T>
Tensor<T> total_loss(const Tensor<T>& pred, const Tensor<T>& target, double lambda_aux,
                     double lambda_hf, int64_t r, const BlurKernel5& k) {
  if (lambda_aux < 0 || lambda_hf < 0) throw UsageError("loss weights must be >= 0");
  auto loss = l1_loss(pred, target);
  if (lambda_aux > 0) loss = add(loss, mul_scalar(aux_loss(pred, target, r), T(lambda_aux)));
  if (lambda_hf > 0) loss = add(loss, mul_scalar(hf_loss(pred, target, k), T(lambda_hf)));
  return loss;
}

}  // namespace s2sr
