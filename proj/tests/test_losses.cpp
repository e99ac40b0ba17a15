#include <catch2/catch_amalgamated.hpp>

#include "s2sr/gradcheck.hpp"
#include "s2sr/losses.hpp"
#include "s2sr/jpeg.hpp"
#include "s2sr/metrics.hpp"
#include "testutil.hpp"

using namespace s2sr;
using testutil::rand_tensor;

namespace {

// Loss targets built as pred - d keep every |.| argument away from zero so
// finite differences stay on one side of each kink. The checkerboard term
// keeps the high-frequency residual bounded away from zero, the constant
// keeps the plain and downsampled residuals away.
template <class T>
Tensor<T> offset_field(Rng& rng, const Shape& s, bool checker, double base) {
  std::vector<T> v(size_t(numel_of(s)));
  int64_t w = s[3];
  for (int64_t i = 0; i < int64_t(v.size()); ++i) {
    int64_t y = (i / w) % s[2], x = i % w;
    double d = base + rng.uniform(-0.05, 0.05);
    if (checker) d += ((y + x) % 2 ? 0.6 : -0.6);
    v[size_t(i)] = T(d);
  }
  return Tensor<T>::from(s, std::move(v));
}

}  // namespace

TEST_CASE("blur kernel invariants for any sigma") {
  for (double sigma : {0.5, 1.0, 2.7}) {
    BlurKernel5 k(sigma);
    double s = 0;
    for (double v : k.taps) {
      REQUIRE(v >= 0.0);
      s += v;
    }
    REQUIRE_THAT(s, Catch::Matchers::WithinAbs(1.0, 1e-9));
    // symmetric under 90-degree rotation and reflection
    for (int y = 0; y < 5; ++y)
      for (int x = 0; x < 5; ++x) {
        REQUIRE(k.taps[size_t(y * 5 + x)] == k.taps[size_t(x * 5 + y)]);
        REQUIRE(k.taps[size_t(y * 5 + x)] == k.taps[size_t((4 - y) * 5 + x)]);
        REQUIRE(k.taps[size_t(y * 5 + x)] == k.taps[size_t(x * 5 + (4 - y))]);
      }
  }
  REQUIRE_THROWS_AS(BlurKernel5(0.0), UsageError);
}

TEST_CASE("l1 loss basics") {
  Rng rng(1);
  auto y = rand_tensor<double>(rng, {1, 3, 6, 6}, 0.0, 1.0);
  REQUIRE(l1_loss(y, y).item() == 0.0);

  auto shifted = add_scalar(y, 0.37);
  REQUIRE_THAT(l1_loss(shifted, y).item(), Catch::Matchers::WithinAbs(0.37, 1e-12));

  REQUIRE_THROWS_AS(l1_loss(y, Tensor<double>::zeros({1, 3, 6, 5})), ShapeError);
}

TEST_CASE("l1 loss gradcheck") {
  Rng rng(2);
  auto target = rand_tensor<double>(rng, {1, 3, 6, 6}, 0.0, 1.0);
  auto pred = add(target, offset_field<double>(rng, {1, 3, 6, 6}, false, 0.5));
  pred.set_requires_grad(true);
  auto f = [&]() { return l1_loss(pred, target); };
  REQUIRE(grad_check(f, {{"pred", pred}}).max_rel_err < 1e-4);
}

TEST_CASE("aux loss basics") {
  Rng rng(3);
  auto y = rand_tensor<double>(rng, {1, 3, 16, 16}, 0.0, 1.0);
  REQUIRE(aux_loss(y, y, 4).item() == 0.0);

  // constant offset survives bicubic downsampling exactly (unit-DC kernel)
  auto shifted = add_scalar(y, 0.25);
  REQUIRE_THAT(aux_loss(shifted, y, 4).item(), Catch::Matchers::WithinAbs(0.25, 1e-9));
}

TEST_CASE("aux loss matches brute-force double oracle") {
  Rng rng(4);
  auto pred = rand_tensor<double>(rng, {1, 3, 16, 16}, 0.0, 1.0);
  auto target = rand_tensor<double>(rng, {1, 3, 16, 16}, 0.0, 1.0);
  double got = aux_loss(pred, target, 4).item();

  double want = 0;
  for (int64_t c = 0; c < 3; ++c) {
    std::vector<double> p(pred.data().begin() + c * 256, pred.data().begin() + (c + 1) * 256);
    std::vector<double> t(target.data().begin() + c * 256, target.data().begin() + (c + 1) * 256);
    auto dp = testutil::oracle_resize_plane(p, 16, 16, 4, 4, true);
    auto dt = testutil::oracle_resize_plane(t, 16, 16, 4, 4, true);
    for (size_t i = 0; i < dp.size(); ++i) want += std::fabs(dp[i] - dt[i]);
  }
  want /= 48.0;
  REQUIRE_THAT(got, Catch::Matchers::WithinAbs(want, 1e-6));
}

TEST_CASE("aux loss gradcheck") {
  Rng rng(5);
  auto target = rand_tensor<double>(rng, {1, 2, 12, 12}, 0.0, 1.0);
  auto pred = add(target, offset_field<double>(rng, {1, 2, 12, 12}, false, 0.7));
  pred.set_requires_grad(true);
  auto f = [&]() { return aux_loss(pred, target, 3); };
  auto rep = grad_check(f, {{"pred", pred}});
  REQUIRE(rep.max_rel_err < 1e-4);
}

TEST_CASE("hf loss basics") {
  Rng rng(6);
  BlurKernel5 k(1.0);
  auto y = rand_tensor<double>(rng, {1, 3, 10, 10}, 0.0, 1.0);
  REQUIRE(hf_loss(y, y, k).item() == 0.0);

  // constant offsets are annihilated: HF(y + c) == HF(y)
  auto shifted = add_scalar(y, 0.4);
  REQUIRE(hf_loss(shifted, y, k).item() < 1e-9);
}

TEST_CASE("hf loss matches brute-force double oracle") {
  Rng rng(7);
  BlurKernel5 k(1.0);
  auto pred = rand_tensor<double>(rng, {1, 3, 10, 10}, 0.0, 1.0);
  auto target = rand_tensor<double>(rng, {1, 3, 10, 10}, 0.0, 1.0);
  double got = hf_loss(pred, target, k).item();

  // independent evaluation: reflect-pad, 5x5 conv, HF difference, L1
  auto blur_at = [&](const std::vector<double>& plane, int64_t h, int64_t w, int64_t y,
                     int64_t x) {
    auto refl = [](int64_t i, int64_t n) {
      if (i < 0) return -i;
      if (i >= n) return 2 * n - 2 - i;
      return i;
    };
    double acc = 0;
    for (int64_t ky = -2; ky <= 2; ++ky)
      for (int64_t kx = -2; kx <= 2; ++kx)
        acc += k.taps[size_t((ky + 2) * 5 + kx + 2)] *
               plane[size_t(refl(y + ky, h) * w + refl(x + kx, w))];
    return acc;
  };
  double want = 0;
  for (int64_t c = 0; c < 3; ++c) {
    std::vector<double> p(pred.data().begin() + c * 100, pred.data().begin() + (c + 1) * 100);
    std::vector<double> t(target.data().begin() + c * 100, target.data().begin() + (c + 1) * 100);
    for (int64_t y = 0; y < 10; ++y)
      for (int64_t x = 0; x < 10; ++x) {
        double hf_p = p[size_t(y * 10 + x)] - blur_at(p, 10, 10, y, x);
        double hf_t = t[size_t(y * 10 + x)] - blur_at(t, 10, 10, y, x);
        want += std::fabs(hf_t - hf_p);
      }
  }
  want /= 300.0;
  REQUIRE_THAT(got, Catch::Matchers::WithinAbs(want, 1e-6));
}

TEST_CASE("hf loss gradcheck") {
  Rng rng(8);
  BlurKernel5 k(1.0);
  auto target = rand_tensor<double>(rng, {1, 2, 8, 8}, 0.0, 1.0);
  auto pred = add(target, offset_field<double>(rng, {1, 2, 8, 8}, true, 0.0));
  pred.set_requires_grad(true);
  auto f = [&]() { return hf_loss(pred, target, k); };
  REQUIRE(grad_check(f, {{"pred", pred}}).max_rel_err < 1e-4);
}

TEST_CASE("total loss composition") {
  Rng rng(9);
  BlurKernel5 k(1.0);
  auto target = rand_tensor<float>(rng, {1, 3, 8, 8}, 0.0, 1.0);
  auto pred = rand_tensor<float>(rng, {1, 3, 8, 8}, 0.0, 1.0);

  // zero weights give exactly the plain L1 value
  REQUIRE(total_loss(pred, target, 0.0, 0.0, 2, k).item() == l1_loss(pred, target).item());
  // identical pair is zero for any weights
  REQUIRE(total_loss(target, target, 0.3, 0.7, 2, k).item() == 0.0f);

  // combined gradcheck with all terms bounded away from their kinks
  auto t2 = rand_tensor<double>(rng, {1, 2, 8, 8}, 0.0, 1.0);
  auto p2 = add(t2, offset_field<double>(rng, {1, 2, 8, 8}, true, 2.0));
  p2.set_requires_grad(true);
  auto f = [&]() { return total_loss(p2, t2, 0.1, 0.1, 2, k); };
  REQUIRE(grad_check(f, {{"pred", p2}}).max_rel_err < 1e-4);
}

TEST_CASE("psnr closed forms") {
  // identical planes cap at 100 dB
  std::vector<double> a(64, 50.0);
  REQUIRE(psnr_y_planes(a, a, 8, 8, 0) == 100.0);

  // uniform Y difference of 16 -> 10*log10(255^2/256) ~ 24.05 dB
  std::vector<double> b(64, 66.0);
  REQUIRE_THAT(psnr_y_planes(a, b, 8, 8, 0), Catch::Matchers::WithinAbs(24.0486, 0.01));
}

TEST_CASE("psnr and ssim image metrics") {
  Rng rng(10);
  auto img = testutil::synth_image(rng, 40, 40);
  REQUIRE(psnr_y(img, img, 2) == 100.0);
  REQUIRE_THAT(ssim_y(img, img, 2), Catch::Matchers::WithinAbs(1.0, 1e-12));

  auto deg = jpeg_decode(jpeg_encode(img, 30));

  // symmetry
  REQUIRE(psnr_y(img, deg, 2) == psnr_y(deg, img, 2));

  // independent scalar-loop oracles
  auto ya = luma_studio_plane(img);
  auto yb = luma_studio_plane(deg);
  int64_t h = 40, w = 40, shave = 2;
  double mse = 0;
  int64_t n = 0;
  for (int64_t y = shave; y < h - shave; ++y)
    for (int64_t x = shave; x < w - shave; ++x) {
      double d = ya[size_t(y * w + x)] - yb[size_t(y * w + x)];
      mse += d * d;
      ++n;
    }
  mse /= double(n);
  double want_psnr = 10.0 * std::log10(255.0 * 255.0 / mse);
  REQUIRE_THAT(psnr_y(img, deg, shave), Catch::Matchers::WithinAbs(want_psnr, 0.001));

  // SSIM oracle: direct per-window loops with explicit Gaussian weights
  double win[11], s = 0;
  for (int i = 0; i < 11; ++i) {
    double d = double(i) - 5.0;
    win[i] = std::exp(-d * d / 4.5);
    s += win[i];
  }
  for (auto& v : win) v /= s;
  const double c1 = 6.5025, c2 = 58.5225;
  double total = 0;
  int64_t cnt = 0;
  for (int64_t wy = shave; wy + 11 <= h - shave; ++wy)
    for (int64_t wx = shave; wx + 11 <= w - shave; ++wx) {
      double mx = 0, my = 0, vx = 0, vy = 0, cov = 0;
      for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) {
          double wgt = win[i] * win[j];
          mx += wgt * ya[size_t((wy + i) * w + wx + j)];
          my += wgt * yb[size_t((wy + i) * w + wx + j)];
        }
      for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) {
          double wgt = win[i] * win[j];
          double da = ya[size_t((wy + i) * w + wx + j)] - mx;
          double db = yb[size_t((wy + i) * w + wx + j)] - my;
          vx += wgt * da * da;
          vy += wgt * db * db;
          cov += wgt * da * db;
        }
      total += ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++cnt;
    }
  REQUIRE_THAT(ssim_y(img, deg, shave), Catch::Matchers::WithinAbs(total / double(cnt), 1e-4));
}

TEST_CASE("metrics csv format") {
  std::vector<MetricsRow> rows = {{"a.png", 30.5, 0.91}, {"b.png", 29.5, 0.89}};
  auto csv = metrics_csv(rows);
  REQUIRE(csv.find("image_id,psnr_y,ssim_y\n") == 0);
  REQUIRE(csv.find("a.png,30.5000,0.910000") != std::string::npos);
  REQUIRE(csv.find("mean,30.0000,0.900000") != std::string::npos);
}
