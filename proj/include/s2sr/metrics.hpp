#pragma once

// Evaluation metrics on the Y channel (studio-range BT.601), with border
// shaving. PSNR caps at 100 dB; SSIM uses the 11x11 sigma-1.5 Gaussian
// window with K1=0.01, K2=0.03 on valid window positions.

#include <sstream>

#include "s2sr/image.hpp"

namespace s2sr {

// PSNR between two Y planes (values on the 0..255 scale).
inline double psnr_y_planes(const std::vector<double>& a, const std::vector<double>& b,
                            int64_t h, int64_t w, int64_t shave) {
  if (a.size() != b.size() || int64_t(a.size()) != h * w)
    throw ShapeError("psnr plane size mismatch");
  if (2 * shave >= h || 2 * shave >= w) throw UsageError("shave leaves no pixels");
  double mse = 0;
  int64_t n = 0;
  for (int64_t y = shave; y < h - shave; ++y)
    for (int64_t x = shave; x < w - shave; ++x) {
      double d = a[size_t(y * w + x)] - b[size_t(y * w + x)];
      mse += d * d;
      ++n;
    }
  mse /= double(n);
  if (mse == 0.0) return 100.0;
  return std::min(100.0, 10.0 * std::log10(255.0 * 255.0 / mse));
}

inline double psnr_y(const ImageU8& a, const ImageU8& b, int64_t shave) {
  if (a.height != b.height || a.width != b.width) throw ShapeError("psnr image size mismatch");
  return psnr_y_planes(luma_studio_plane(a), luma_studio_plane(b), a.height, a.width, shave);
}

inline double ssim_y_planes(const std::vector<double>& a, const std::vector<double>& b,
                            int64_t h, int64_t w, int64_t shave) {
  if (a.size() != b.size() || int64_t(a.size()) != h * w)
    throw ShapeError("ssim plane size mismatch");
  int64_t hs = h - 2 * shave, ws = w - 2 * shave;
  if (hs < 11 || ws < 11) throw UsageError("ssim needs at least 11x11 after shaving");

  // 11x11 Gaussian window, sigma 1.5
  double win[11];
  double s = 0;
  for (int i = 0; i < 11; ++i) {
    double d = double(i) - 5.0;
    win[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
    s += win[i];
  }
  for (auto& v : win) v /= s;

  const double c1 = (0.01 * 255.0) * (0.01 * 255.0);
  const double c2 = (0.03 * 255.0) * (0.03 * 255.0);

  double total = 0;
  int64_t count = 0;
  for (int64_t wy = 0; wy + 11 <= hs; ++wy)
    for (int64_t wx = 0; wx + 11 <= ws; ++wx) {
      double mx = 0, my = 0;
      for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) {
          double wgt = win[i] * win[j];
          size_t idx = size_t((shave + wy + i) * w + shave + wx + j);
          mx += wgt * a[idx];
          my += wgt * b[idx];
        }
      double vx = 0, vy = 0, cov = 0;
      for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) {
          double wgt = win[i] * win[j];
          size_t idx = size_t((shave + wy + i) * w + shave + wx + j);
          double da = a[idx] - mx, db = b[idx] - my;
          vx += wgt * da * da;
          vy += wgt * db * db;
          cov += wgt * da * db;
        }
      total += ((2 * mx * my + c1) * (2 * cov + c2)) /
               ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++count;
    }
  return total / double(count);
}

inline double ssim_y(const ImageU8& a, const ImageU8& b, int64_t shave) {
  if (a.height != b.height || a.width != b.width) throw ShapeError("ssim image size mismatch");
  return ssim_y_planes(luma_studio_plane(a), luma_studio_plane(b), a.height, a.width, shave);
}

// CSV report: one row per image plus a mean row.
struct MetricsRow {
  std::string image_id;
  double psnr = 0;
  double ssim = 0;
};

inline std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::ostringstream out;
  out << "image_id,psnr_y,ssim_y\n";
  double ps = 0, ss = 0;
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.4f,%.6f", r.psnr, r.ssim);
    out << r.image_id << "," << buf << "\n";
    ps += r.psnr;
    ss += r.ssim;
  }
  if (!rows.empty()) {
    std::snprintf(buf, sizeof buf, "%.4f,%.6f", ps / double(rows.size()),
                  ss / double(rows.size()));
    out << "mean," << buf << "\n";
  }
  return out.str();
}

}  // namespace s2sr
