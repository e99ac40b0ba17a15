#include <catch2/catch_amalgamated.hpp>

#include "s2sr/gradcheck.hpp"
#include "s2sr/ops.hpp"

using namespace s2sr;

namespace {

Tensor<double> randn(Rng& rng, Shape shape, double scale = 1.0) {
  std::vector<double> v(size_t(numel_of(shape)));
  for (auto& x : v) x = rng.uniform(-2.0, 2.0) * scale;
  return Tensor<double>::from(std::move(shape), std::move(v));
}

}  // namespace

TEST_CASE("matmul basic cases") {
  auto eye = Tensor<float>::from({2, 2}, {1, 0, 0, 1});
  auto m = Tensor<float>::from({2, 2}, {2, 3, 4, 5});
  auto r = matmul(eye, m);
  REQUIRE(r.data() == std::vector<float>({2, 3, 4, 5}));

  auto a = Tensor<float>::from({1, 2}, {1, 2});
  auto b = Tensor<float>::from({2, 1}, {3, 4});
  REQUIRE(matmul(a, b).item() == 11.0f);

  REQUIRE_THROWS_AS(matmul(Tensor<float>::zeros({2, 3}), Tensor<float>::zeros({2, 3})),
                    ShapeError);
}

TEST_CASE("matmul batch broadcast") {
  // [2,2,3] x [3,2] -> [2,2,2]
  Rng rng(7);
  auto a = randn(rng, {2, 2, 3});
  auto w = randn(rng, {3, 2});
  auto y = matmul(a, w);
  REQUIRE(y.shape() == Shape({2, 2, 2}));
  for (int b = 0; b < 2; ++b)
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) {
        double acc = 0;
        for (int k = 0; k < 3; ++k)
          acc += a.data()[size_t(b * 6 + i * 3 + k)] * w.data()[size_t(k * 2 + j)];
        REQUIRE_THAT(y.data()[size_t(b * 4 + i * 2 + j)], Catch::Matchers::WithinAbs(acc, 1e-12));
      }
}

TEST_CASE("matmul gradients vs finite differences") {
  Rng rng(42);
  auto a = randn(rng, {3, 4});
  auto b = randn(rng, {4, 2});
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  auto f = [&]() { return mean_abs(matmul(a, b)); };
  auto rep = grad_check(f, {{"a", a}, {"b", b}});
  REQUIRE(rep.max_rel_err < 1e-4);
}

TEST_CASE("matmul batched gradcheck") {
  Rng rng(43);
  auto a = randn(rng, {2, 2, 3, 4});
  auto b = randn(rng, {2, 2, 4, 3});
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  auto f = [&]() { return mean_abs(matmul(a, b)); };
  auto rep = grad_check(f, {{"a", a}, {"b", b}});
  REQUIRE(rep.max_rel_err < 1e-4);
}

TEST_CASE("conv2d identity kernel") {
  auto x = Tensor<float>::from({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  auto w = Tensor<float>::from({1, 1, 1, 1}, {1});
  auto y = conv2d(x, w, Tensor<float>(), 0);
  REQUIRE(y.shape() == x.shape());
  REQUIRE(y.data() == x.data());
}

TEST_CASE("conv2d constant propagation") {
  const float c = 0.37f;
  auto x = Tensor<float>::full({1, 1, 6, 6}, c);
  Rng rng(5);
  std::vector<float> kv(9);
  float s = 0;
  for (auto& v : kv) {
    v = float(rng.uniform(-1, 1));
    s += v;
  }
  auto w = Tensor<float>::from({1, 1, 3, 3}, kv);
  auto y = conv2d(x, w, Tensor<float>(), 1);
  // interior pixels see the full kernel
  for (int i = 1; i < 5; ++i)
    for (int j = 1; j < 5; ++j)
      REQUIRE_THAT(y.data()[size_t(i * 6 + j)], Catch::Matchers::WithinAbs(c * s, 1e-5));
}

TEST_CASE("conv2d gradients vs finite differences") {
  Rng rng(11);
  auto x = randn(rng, {1, 2, 5, 5}, 0.5);
  auto w = randn(rng, {3, 2, 3, 3}, 0.5);
  auto bias = randn(rng, {3}, 0.5);
  x.set_requires_grad(true);
  w.set_requires_grad(true);
  bias.set_requires_grad(true);
  auto f = [&]() { return mean_abs(conv2d(x, w, bias, 1)); };
  auto rep = grad_check(f, {{"x", x}, {"w", w}, {"b", bias}});
  REQUIRE(rep.max_rel_err < 1e-4);
}

TEST_CASE("conv2d channel mismatch") {
  auto x = Tensor<float>::zeros({1, 2, 4, 4});
  auto w = Tensor<float>::zeros({1, 3, 3, 3});
  REQUIRE_THROWS_AS(conv2d(x, w, Tensor<float>(), 1), ShapeError);
}

TEST_CASE("layer_norm examples") {
  // constant per token -> zero output with gamma=1, beta=0
  auto x = Tensor<float>::from({2, 4}, {3, 3, 3, 3, -1, -1, -1, -1});
  auto gamma = Tensor<float>::full({4}, 1.0f);
  auto beta = Tensor<float>::zeros({4});
  auto y = layer_norm(x, gamma, beta, 1e-5f);
  for (float v : y.data()) REQUIRE_THAT(v, Catch::Matchers::WithinAbs(0.0, 1e-6));

  // gamma=0 -> beta everywhere
  auto beta2 = Tensor<float>::full({4}, 0.25f);
  auto y2 = layer_norm(x, Tensor<float>::zeros({4}), beta2, 1e-5f);
  for (float v : y2.data()) REQUIRE(v == 0.25f);
}

TEST_CASE("layer_norm token statistics") {
  Rng rng(3);
  auto x = randn(rng, {4, 8});
  auto gamma = Tensor<double>::full({8}, 1.0);
  auto beta = Tensor<double>::zeros({8});
  auto y = layer_norm(x, gamma, beta, 1e-8);
  for (int t = 0; t < 4; ++t) {
    double mean = 0, var = 0;
    for (int j = 0; j < 8; ++j) mean += y.data()[size_t(t * 8 + j)];
    mean /= 8;
    for (int j = 0; j < 8; ++j) {
      double d = y.data()[size_t(t * 8 + j)] - mean;
      var += d * d;
    }
    var /= 8;
    REQUIRE(std::fabs(mean) < 1e-6);
    REQUIRE(std::fabs(var - 1.0) < 1e-4);
  }
}

TEST_CASE("layer_norm gradcheck") {
  Rng rng(17);
  auto x = randn(rng, {3, 6});
  auto gamma = randn(rng, {6});
  auto beta = randn(rng, {6});
  x.set_requires_grad(true);
  gamma.set_requires_grad(true);
  beta.set_requires_grad(true);
  auto probe = randn(rng, {3, 6});
  auto f = [&]() { return mean_abs(mul(layer_norm(x, gamma, beta, 1e-5), probe)); };
  auto rep = grad_check(f, {{"x", x}, {"gamma", gamma}, {"beta", beta}});
  REQUIRE(rep.max_rel_err < 1e-4);
}

TEST_CASE("softmax examples") {
  auto y = softmax_lastdim(Tensor<float>::from({3}, {0, 0, 0}));
  for (float v : y.data()) REQUIRE_THAT(v, Catch::Matchers::WithinAbs(1.0 / 3, 1e-7));

  auto y2 = softmax_lastdim(Tensor<double>::from({2}, {5.0, 5.0 - 100.0}));
  REQUIRE(y2.data()[0] >= 1.0 - 1e-8);

  // rows sum to 1
  Rng rng(23);
  auto x = randn(rng, {4, 5});
  auto y3 = softmax_lastdim(x);
  for (int r = 0; r < 4; ++r) {
    double s = 0;
    for (int j = 0; j < 5; ++j) s += y3.data()[size_t(r * 5 + j)];
    REQUIRE_THAT(s, Catch::Matchers::WithinAbs(1.0, 1e-6));
  }
}

TEST_CASE("softmax gradcheck") {
  Rng rng(29);
  auto x = randn(rng, {5});
  auto probe = randn(rng, {5});
  x.set_requires_grad(true);
  auto f = [&]() { return sum_all(mul(softmax_lastdim(x), probe)); };
  auto rep = grad_check(f, {{"x", x}});
  REQUIRE(rep.max_rel_err < 1e-4);
}

TEST_CASE("elementwise suite values") {
  REQUIRE(gelu(Tensor<double>::scalar(0.0)).item() == 0.0);
  REQUIRE(mean_abs(Tensor<float>::zeros({7})).item() == 0.0f);
  REQUIRE_THAT(sign_log1p(Tensor<double>::scalar(-3.0)).item(),
               Catch::Matchers::WithinAbs(-std::log(4.0), 1e-12));
  REQUIRE_THAT(sigmoid(Tensor<double>::scalar(0.0)).item(),
               Catch::Matchers::WithinAbs(0.5, 1e-12));
}

TEST_CASE("elementwise gradcheck") {
  Rng rng(31);
  auto x = randn(rng, {6});
  x.set_requires_grad(true);
  auto probe = randn(rng, {6});

  SECTION("gelu") {
    auto f = [&]() { return sum_all(mul(gelu(x), probe)); };
    REQUIRE(grad_check(f, {{"x", x}}).max_rel_err < 1e-4);
  }
  SECTION("sigmoid") {
    auto f = [&]() { return sum_all(mul(sigmoid(x), probe)); };
    REQUIRE(grad_check(f, {{"x", x}}).max_rel_err < 1e-4);
  }
  SECTION("sign_log1p") {
    auto f = [&]() { return sum_all(mul(sign_log1p(x), probe)); };
    REQUIRE(grad_check(f, {{"x", x}}).max_rel_err < 1e-4);
  }
  SECTION("exp and sqrt and reciprocal") {
    auto f = [&]() {
      auto e = exp_op(mul_scalar(x, 0.3));
      return sum_all(mul(reciprocal(add_scalar(sqrt_op(e), 1.0)), probe));
    };
    REQUIRE(grad_check(f, {{"x", x}}).max_rel_err < 1e-4);
  }
}

TEST_CASE("clamp gradient is 1 inside and 0 outside") {
  auto x = Tensor<double>::from({4}, {-2.0, -0.5, 0.5, 2.0});
  x.set_requires_grad(true);
  Tape<double> tape;
  {
    Tape<double>::Scope scope(tape);
    auto y = sum_all(clamp(x, -1.0, 1.0));
    tape.backward(y);
  }
  REQUIRE(x.grad() == std::vector<double>({0, 1, 1, 0}));
}

TEST_CASE("broadcast add and reduction of grads") {
  Rng rng(37);
  auto a = randn(rng, {2, 3, 4});
  auto b = randn(rng, {4});
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  auto f = [&]() { return mean_abs(add(a, b)); };
  auto rep = grad_check(f, {{"a", a}, {"b", b}});
  REQUIRE(rep.max_rel_err < 1e-4);

  // forward value check
  auto y = add(a, b);
  REQUIRE(y.shape() == Shape({2, 3, 4}));
  REQUIRE_THAT(y.data()[5], Catch::Matchers::WithinAbs(a.data()[5] + b.data()[1], 1e-12));
}

TEST_CASE("shape mismatch without broadcast is rejected") {
  auto a = Tensor<float>::zeros({2, 3});
  auto b = Tensor<float>::zeros({2, 4});
  REQUIRE_THROWS_AS(add(a, b), ShapeError);
}

TEST_CASE("backward populates leaf gradients") {
  // root = sum(x) -> grad all ones
  auto x = Tensor<double>::from({5}, {1, 2, 3, 4, 5});
  x.set_requires_grad(true);
  Tape<double> tape;
  {
    Tape<double>::Scope scope(tape);
    tape.backward(sum_all(x));
  }
  REQUIRE(x.grad() == std::vector<double>(5, 1.0));

  // root = L1(x, 0) with x > 0 -> grad 1/n each
  auto z = Tensor<double>::from({4}, {0.5, 1.0, 2.0, 3.0});
  z.set_requires_grad(true);
  Tape<double> tape2;
  {
    Tape<double>::Scope scope(tape2);
    tape2.backward(mean_abs(z));
  }
  REQUIRE(z.grad() == std::vector<double>(4, 0.25));
}

TEST_CASE("backward requires scalar root") {
  auto x = Tensor<double>::from({2}, {1, 2});
  x.set_requires_grad(true);
  Tape<double> tape;
  Tape<double>::Scope scope(tape);
  auto y = mul_scalar(x, 2.0);
  REQUIRE_THROWS_AS(tape.backward(y), UsageError);
}

TEST_CASE("grad accumulates across shared subexpressions") {
  auto x = Tensor<double>::scalar(3.0);
  x.set_requires_grad(true);
  Tape<double> tape;
  {
    Tape<double>::Scope scope(tape);
    auto y = add(mul(x, x), x);  // x^2 + x -> dy/dx = 2x + 1 = 7
    tape.backward(sum_all(y));
  }
  REQUIRE_THAT(x.grad()[0], Catch::Matchers::WithinAbs(7.0, 1e-12));
}

TEST_CASE("gradcheck quadratic form is near exact") {
  Rng rng(41);
  auto x = randn(rng, {4});
  auto A = randn(rng, {4, 4});
  x.set_requires_grad(true);
  auto f = [&]() {
    auto col = reshape(x, {4, 1});
    return sum_all(mul(matmul(A, col), col));
  };
  auto rep = grad_check(f, {{"x", x}});
  REQUIRE(rep.max_rel_err < 1e-8);
}

TEST_CASE("gradcheck catches a wrong backward rule") {
  Rng rng(47);
  auto x = randn(rng, {5});
  x.set_requires_grad(true);
  auto broken_square = [](const Tensor<double>& t) {
    // forward t^2, backward wrongly claims d/dt = 3t
    return unary_op<double>(
        t, "broken_square", [](double v) { return v * v; },
        [](double g, double v) { return g * 3.0 * v; });
  };
  auto f = [&]() { return sum_all(broken_square(x)); };
  auto rep = grad_check(f, {{"x", x}});
  REQUIRE_FALSE(rep.pass(1e-4));
}

TEST_CASE("shape and reduction ops") {
  auto x = Tensor<float>::from({2, 3}, {1, 2, 3, 4, 5, 6});
  auto r = reshape(x, {3, 2});
  REQUIRE(r.shape() == Shape({3, 2}));
  REQUIRE(r.data() == x.data());
  REQUIRE_THROWS_AS(reshape(x, {4, 2}), ShapeError);

  auto p = permute(x, {1, 0});
  REQUIRE(p.shape() == Shape({3, 2}));
  REQUIRE(p.data() == std::vector<float>({1, 4, 2, 5, 3, 6}));

  auto s = sum_lastdim(x);
  REQUIRE(s.shape() == Shape({2, 1}));
  REQUIRE(s.data() == std::vector<float>({6, 15}));
}

TEST_CASE("permute and roll gradcheck") {
  Rng rng(53);
  auto x = randn(rng, {2, 3, 4, 2});
  x.set_requires_grad(true);
  auto probe = randn(rng, {2, 4, 2, 3});
  SECTION("permute") {
    auto f = [&]() { return sum_all(mul(permute(x, {0, 2, 3, 1}), probe)); };
    REQUIRE(grad_check(f, {{"x", x}}).max_rel_err < 1e-4);
  }
  SECTION("roll") {
    auto probe2 = randn(rng, {2, 3, 4, 2});
    auto f = [&]() { return sum_all(mul(roll_hw(x, -1, -2), probe2)); };
    REQUIRE(grad_check(f, {{"x", x}}).max_rel_err < 1e-4);
  }
}

TEST_CASE("reflect pad and crop") {
  auto x = Tensor<float>::from({1, 1, 2, 3}, {1, 2, 3, 4, 5, 6});
  auto y = reflect_pad_hw(x, 1, 1, 1, 1);
  REQUIRE(y.shape() == Shape({1, 1, 4, 5}));
  // row -1 reflects row 1, col -1 reflects col 1
  std::vector<float> want = {5, 4, 5, 6, 5,  //
                             2, 1, 2, 3, 2,  //
                             5, 4, 5, 6, 5,  //
                             2, 1, 2, 3, 2};
  REQUIRE(y.data() == want);

  auto back = crop_hw(y, 1, 1, 2, 3);
  REQUIRE(back.data() == x.data());

  Rng rng(59);
  auto z = randn(rng, {1, 2, 4, 5});
  z.set_requires_grad(true);
  auto probe = randn(rng, {1, 2, 6, 7});
  auto f = [&]() { return sum_all(mul(reflect_pad_hw(z, 1, 1, 1, 1), probe)); };
  REQUIRE(grad_check(f, {{"z", z}}).max_rel_err < 1e-4);
}

TEST_CASE("gather rows with repeats") {
  auto x = Tensor<double>::from({3, 2}, {1, 2, 3, 4, 5, 6});
  x.set_requires_grad(true);
  auto y = gather_rows(x, {2, 0, 2});
  REQUIRE(y.data() == std::vector<double>({5, 6, 1, 2, 5, 6}));

  auto probe = Tensor<double>::from({3, 2}, {1, 1, 1, 1, 1, 1});
  auto f = [&]() { return sum_all(mul(gather_rows(x, {2, 0, 2}), probe)); };
  REQUIRE(grad_check(f, {{"x", x}}).max_rel_err < 1e-4);
}

TEST_CASE("forward is deterministic") {
  Rng rng1(101), rng2(101);
  auto a1 = randn(rng1, {4, 4});
  auto a2 = randn(rng2, {4, 4});
  REQUIRE(a1.data() == a2.data());
  auto y1 = softmax_lastdim(matmul(a1, a1));
  auto y2 = softmax_lastdim(matmul(a2, a2));
  REQUIRE(y1.data() == y2.data());
}

TEST_CASE("non-finite forward values raise") {
  auto x = Tensor<double>::from({2}, {800.0, 0.0});
  REQUIRE_THROWS_AS(exp_op(x), NumericError);
  set_finite_checks(false);
  REQUIRE_NOTHROW(exp_op(x));
  set_finite_checks(true);
}

TEST_CASE("memory stats track tensor payloads") {
  MemStats::reset_peak();
  int64_t before = MemStats::current().load();
  {
    auto t = Tensor<float>::zeros({1024});
    REQUIRE(MemStats::current().load() >= before + 4096);
  }
  REQUIRE(MemStats::current().load() <= before + 64);
}
