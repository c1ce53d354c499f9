#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "doctest.h"
#include "sgat/autograd.hpp"
#include "sgat/gradcheck.hpp"
#include "sgat/ops.hpp"
#include "sgat/rng.hpp"

using namespace sgat;

namespace {

Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0,
                     DType dtype = DType::F64) {
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(shape, v, dtype);
}

// Values bounded away from zero so kinks (relu, abs) stay out of reach of h.
Tensor random_off_zero(const Shape& shape, Rng& rng) {
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) {
    const double m = rng.uniform(0.05, 1.0);
    x = rng.bernoulli(0.5) ? m : -m;
  }
  return Tensor::from(shape, v, DType::F64);
}

// Direct nested-loop "same" convolution, independent of the library kernel.
std::vector<double> direct_conv2d(const std::vector<double>& in, int n, int ci, int h, int w,
                                  const std::vector<double>& k, int co, int kh, int kw) {
  const int ph = (kh - 1) / 2;
  const int pw = (kw - 1) / 2;
  std::vector<double> out(static_cast<std::size_t>(n * co * h * w), 0.0);
  for (int b = 0; b < n; ++b)
    for (int o = 0; o < co; ++o)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          double s = 0.0;
          for (int c = 0; c < ci; ++c)
            for (int dy = 0; dy < kh; ++dy)
              for (int dx = 0; dx < kw; ++dx) {
                const int yy = y + dy - ph;
                const int xx = x + dx - pw;
                if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
                s += in[((b * ci + c) * h + yy) * w + xx] * k[((o * ci + c) * kh + dy) * kw + dx];
              }
          out[((b * co + o) * h + y) * w + x] = s;
        }
  return out;
}

void check_primitive(const char* name, const std::function<Tensor(const Tensor&)>& fn,
                     const std::function<Tensor(Rng&)>& point, int trials = 100) {
  Rng rng(12345);
  double worst = 0.0;
  for (int t = 0; t < trials; ++t) {
    auto report = finite_diff_check(fn, point(rng));
    worst = std::max(worst, report.max_rel_error);
  }
  INFO(name);
  CHECK(worst < 1e-4);
}

}  // namespace

TEST_CASE("factories and element access") {
  auto t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.rank() == 2);
  CHECK(t.value(4) == 5.0);
  CHECK(t.dtype() == DType::F32);
  CHECK_THROWS_AS(Tensor::from({2, 2}, {1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(Tensor::zeros({2, 0}), ShapeError);
  {
    DTypeScope scope(DType::F64);
    CHECK(Tensor::zeros({1}).dtype() == DType::F64);
  }
  CHECK(Tensor::zeros({1}).dtype() == DType::F32);
}

TEST_CASE("broadcasting arithmetic") {
  auto a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  auto b = Tensor::from({1, 3}, {1, 2, 4});
  CHECK(add(a, b).values() == std::vector<double>{2, 4, 7, 5, 7, 10});
  CHECK(mul(a, b).values() == std::vector<double>{1, 4, 12, 4, 10, 24});
  auto col = Tensor::from({2, 1}, {10, 20});
  CHECK(sub(a, col).values() == std::vector<double>{-9, -8, -7, -16, -15, -14});
  CHECK(sum_to(a, {1, 3}).values() == std::vector<double>{5, 7, 9});
  CHECK(sum_to(a, {2, 1}).values() == std::vector<double>{6, 15});
  CHECK(expand(b, {2, 3}).values() == std::vector<double>{1, 2, 4, 1, 2, 4});
  CHECK_THROWS_AS(add(a, Tensor::zeros({2})), ShapeError);
  auto c = Tensor::ones({2, 3, 4, 5});
  auto ch = Tensor::from({1, 3, 1, 1}, {1, 2, 3});
  auto r = mul(c, ch);
  CHECK(sum(r).item() == doctest::Approx(2 * 20 * 6));
  CHECK(r.value(20) == 2.0);
}

TEST_CASE("conv_same with identity kernel returns the input") {
  Rng rng(1);
  auto x = random_tensor({1, 1, 5, 5}, rng, -1, 1, DType::F32);
  auto k = Tensor::ones({1, 1, 1, 1});
  auto y = conv_same(x, k, Tensor::zeros({1}));
  CHECK(y.shape() == x.shape());
  CHECK(y.values() == x.values());
}

TEST_CASE("conv_same preserves spatial extents") {
  Rng rng(2);
  auto x = random_tensor({2, 1, 30, 36}, rng, -1, 1, DType::F32);
  auto k = random_tensor({8, 1, 4, 4}, rng, -1, 1, DType::F32);
  CHECK(conv_same(x, k).shape() == Shape{2, 8, 30, 36});
  auto v = random_tensor({1, 2, 7, 6, 5}, rng, -1, 1, DType::F32);
  auto k3 = random_tensor({3, 2, 4, 4, 4}, rng, -1, 1, DType::F32);
  CHECK(conv_same(v, k3).shape() == Shape{1, 3, 7, 6, 5});
  CHECK_THROWS_AS(conv_same(x, random_tensor({8, 2, 4, 4}, rng, -1, 1, DType::F32)), ShapeError);
  CHECK_THROWS_AS(conv_same(Tensor::zeros({1, 1, 4}), Tensor::zeros({1, 1, 4})), ShapeError);
}

TEST_CASE("conv_same matches a nested-loop oracle") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const int kh = 1 + trial % 4;
    auto x = random_tensor({2, 2, 6, 6}, rng);
    auto k = random_tensor({3, 2, kh, kh}, rng);
    auto expected = direct_conv2d(x.values(), 2, 2, 6, 6, k.values(), 3, kh, kh);
    auto got = conv_same(x, k).values();
    REQUIRE(got.size() == expected.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      CHECK(std::abs(got[i] - expected[i]) < 1e-12);
    }
  }
  // The single-channel 6x6 / 3x3 case in 32-bit.
  auto x = random_tensor({1, 1, 6, 6}, rng, -1, 1, DType::F32);
  auto k = random_tensor({1, 1, 3, 3}, rng, -1, 1, DType::F32);
  auto expected = direct_conv2d(x.values(), 1, 1, 6, 6, k.values(), 1, 3, 3);
  auto got = conv_same(x, k).values();
  for (std::size_t i = 0; i < got.size(); ++i) {
    CHECK(std::abs(got[i] - expected[i]) < 1e-6);
  }
}

TEST_CASE("maxpool") {
  auto x = Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4});
  CHECK(maxpool(x, 2).values() == std::vector<double>{4});

  auto odd = Tensor::zeros({1, 1, 15, 15});
  CHECK(maxpool(odd, 2).shape() == Shape{1, 1, 7, 7});
  CHECK(maxpool(Tensor::zeros({1, 2, 33, 46, 48}), 2).shape() == Shape{1, 2, 16, 23, 24});
  CHECK_THROWS_AS(maxpool(Tensor::zeros({1, 1, 1, 4}), 2), ShapeError);

  DTypeScope f64(DType::F64);
  auto v = Tensor::from({1, 1, 2, 4}, {1, 5, 2, 0, 3, 2, 7, 1}).set_requires_grad(true);
  Tensor var = v;
  auto g = grad(sum(maxpool(var, 2)), std::span<const Tensor>(&var, 1))[0];
  CHECK(g.values() == std::vector<double>{0, 1, 0, 0, 0, 0, 1, 0});
}

TEST_CASE("batchnorm") {
  DTypeScope f64(DType::F64);
  Rng rng(4);
  auto x = random_tensor({4, 3, 5, 5}, rng, -3, 5);
  auto scale = Tensor::ones({3});
  auto shift = Tensor::zeros({3});

  SUBCASE("training mode normalizes each channel") {
    BatchNormStats stats;
    auto y = batchnorm_train(x, scale, shift, 1e-5, &stats);
    auto v = y.values();
    for (int c = 0; c < 3; ++c) {
      double m = 0.0;
      double s2 = 0.0;
      int count = 0;
      for (int b = 0; b < 4; ++b)
        for (int i = 0; i < 25; ++i) {
          const double e = v[static_cast<std::size_t>((b * 3 + c) * 25 + i)];
          m += e;
          s2 += e * e;
          ++count;
        }
      m /= count;
      const double var = s2 / count - m * m;
      CHECK(std::abs(m) < 1e-5);
      CHECK(std::abs(var - 1.0) < 1e-3);
    }
    CHECK(stats.mean.shape() == Shape{3});
  }

  SUBCASE("constant channel maps to zero") {
    auto c = Tensor::full({1, 1, 3, 3}, 7.0);
    auto y = batchnorm_train(c, Tensor::ones({1}), Tensor::zeros({1}), 1e-5);
    for (double e : y.values()) CHECK(e == 0.0);
  }

  SUBCASE("inference with converged running stats matches training output") {
    auto rm = Tensor::zeros({3});
    auto rv = Tensor::ones({3});
    BatchNormStats stats;
    Tensor train_out;
    for (int i = 0; i < 200; ++i) {
      train_out = batchnorm_train(x, scale, shift, 1e-5, &stats);
      rm = add(mul_scalar(rm, 0.9), mul_scalar(stats.mean, 0.1));
      rv = add(mul_scalar(rv, 0.9), mul_scalar(stats.var, 0.1));
    }
    auto infer = batchnorm_infer(x, scale, shift, rm, rv, 1e-5);
    auto a = train_out.values();
    auto b = infer.values();
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) < 1e-3);
  }

  CHECK_THROWS_AS(batchnorm_train(x, Tensor::ones({2}), shift, 1e-5), ShapeError);
}

TEST_CASE("backward basics") {
  DTypeScope f64(DType::F64);
  auto x = Tensor::from({4}, {1, -2, 3, 0.5}).set_requires_grad(true);
  Tensor xv = x;
  auto g = backward(sum(mul(xv, xv)));
  CHECK(g[xv].values() == std::vector<double>{2, -4, 6, 1});
  auto g1 = backward(sum(xv));
  CHECK(g1[xv].values() == std::vector<double>{1, 1, 1, 1});
  CHECK_THROWS_AS(backward(mul(xv, xv)), ContractError);
  // Unreached variables get zeros.
  auto other = Tensor::ones({2}).set_requires_grad(true);
  Tensor ov = other;
  CHECK(g1[ov].values() == std::vector<double>{0, 0});
}

TEST_CASE("detach stops gradient flow") {
  DTypeScope f64(DType::F64);
  Tensor a = Tensor::from({3}, {1, 2, 3}).set_requires_grad(true);
  Tensor b = Tensor::from({3}, {4, 5, 6}).set_requires_grad(true);
  auto d = b.detach();
  CHECK(d.values() == b.values());
  CHECK_FALSE(d.requires_grad());
  auto g = backward(sum(mul(a, d)));
  CHECK(g[b].values() == std::vector<double>{0, 0, 0});
  CHECK(g[a].values() == std::vector<double>{4, 5, 6});
}

TEST_CASE("higher-order: second derivative of sum(x^3) is 6x") {
  DTypeScope f64(DType::F64);
  Rng rng(5);
  Tensor x = random_tensor({10}, rng, -2, 2).set_requires_grad(true);
  auto cube = mul(x, mul(x, x));
  auto first = grad(sum(cube), std::span<const Tensor>(&x, 1), {.create_graph = true})[0];
  CHECK(first.requires_grad());
  auto second = grad(sum(first), std::span<const Tensor>(&x, 1))[0];
  auto xv = x.values();
  auto sv = second.values();
  for (std::size_t i = 0; i < xv.size(); ++i) {
    CHECK(relative_error(sv[i], 6 * xv[i], 1e-12) < 1e-6);
  }
}

TEST_CASE("higher-order through conv, pooling and dense") {
  DTypeScope f64(DType::F64);
  Rng rng(6);
  Tensor x = random_tensor({1, 2, 6, 6}, rng);
  Tensor k = random_tensor({3, 2, 3, 3}, rng).set_requires_grad(true);
  Tensor w = random_tensor({2, 27}, rng).set_requires_grad(true);
  Tensor b = Tensor::zeros({2});
  // Scalar: squared norm of d(score)/d(features), a function of k and w.
  auto objective = [&]() {
    Tensor f = relu(conv_same(x, k));
    Tensor s = sum(mul(dense(flatten(maxpool(f, 2)), w, b), Tensor::from({1, 2}, {1.0, -0.5})));
    Tensor gf = grad(s, std::span<const Tensor>(&f, 1), {.create_graph = true})[0];
    return sum(square(mul(gf, f)));
  };
  auto rk = finite_diff_check_variable(objective, k);
  auto rw = finite_diff_check_variable(objective, w);
  CHECK(rk.max_rel_error < 1e-5);
  CHECK(rw.max_rel_error < 1e-5);
}

TEST_CASE("conv adjoints are themselves differentiable") {
  DTypeScope f64(DType::F64);
  Rng rng(7);
  Tensor x = random_tensor({1, 2, 5, 4}, rng).set_requires_grad(true);
  Tensor k = random_tensor({2, 2, 4, 4}, rng).set_requires_grad(true);
  Tensor u = random_tensor({1, 2, 5, 4}, rng);
  auto loss = [&]() {
    Tensor y = conv_same(x, k);
    Tensor gx = grad(sum(mul(y, u)), std::span<const Tensor>(&x, 1), {.create_graph = true})[0];
    Tensor gk = grad(sum(mul(square(y), u)), std::span<const Tensor>(&k, 1),
                     {.create_graph = true})[0];
    return add(sum(square(gx)), sum(mul(gk, gk)));
  };
  CHECK(finite_diff_check_variable(loss, x).max_rel_error < 1e-5);
  CHECK(finite_diff_check_variable(loss, k).max_rel_error < 1e-5);
}

TEST_CASE("linearity of backward") {
  DTypeScope f64(DType::F64);
  Rng rng(8);
  Tensor x = random_tensor({3, 4}, rng).set_requires_grad(true);
  auto l1 = [&] { return sum(exp(x)); };
  auto l2 = [&] { return sum(mul(x, mul(x, x))); };
  const double a = 0.7;
  const double b = -2.5;
  auto gc = backward(add(mul_scalar(l1(), a), mul_scalar(l2(), b)))[x].values();
  auto g1 = backward(l1())[x].values();
  auto g2 = backward(l2())[x].values();
  for (std::size_t i = 0; i < gc.size(); ++i) {
    CHECK(std::abs(gc[i] - (a * g1[i] + b * g2[i])) < 1e-6 * std::max(1.0, std::abs(gc[i])));
  }
}

TEST_CASE("every primitive passes finite differences at 100 random points") {
  DTypeScope f64(DType::F64);
  auto vec = [](Shape s) { return [s](Rng& r) { return random_tensor(s, r); }; };
  auto off_zero = [](Shape s) { return [s](Rng& r) { return random_off_zero(s, r); }; };
  Rng prng(99);
  Tensor fixed = random_tensor({3, 4}, prng);
  Tensor fixed_row = random_tensor({1, 4}, prng);
  Tensor weights = random_tensor({3, 4}, prng);
  Tensor positive = random_tensor({3, 4}, prng, 0.5, 2.0);

  check_primitive("add", [&](const Tensor& x) { return sum(mul(add(x, fixed_row), weights)); },
                  vec({3, 4}));
  check_primitive("sub", [&](const Tensor& x) { return sum(mul(sub(fixed, x), weights)); },
                  vec({3, 4}));
  check_primitive("mul", [&](const Tensor& x) { return sum(mul(mul(x, fixed), x)); }, vec({3, 4}));
  check_primitive("div", [&](const Tensor& x) { return sum(div(x, positive)); }, vec({3, 4}));
  check_primitive("div denominator", [&](const Tensor& x) { return sum(div(fixed, add_scalar(abs(x), 0.5))); },
                  off_zero({3, 4}));
  check_primitive("matmul", [&](const Tensor& x) { return sum(square(matmul(x, transpose(weights)))); },
                  vec({2, 4}));
  check_primitive("dense", [&](const Tensor& x) {
    return sum(square(dense(fixed, x, Tensor::from({3}, {0.1, 0.2, 0.3}))));
  }, vec({3, 4}));
  check_primitive("relu", [&](const Tensor& x) { return sum(mul(relu(x), weights)); },
                  off_zero({3, 4}));
  check_primitive("abs", [&](const Tensor& x) { return sum(mul(abs(x), weights)); },
                  off_zero({3, 4}));
  check_primitive("exp/log", [&](const Tensor& x) { return sum(log(add_scalar(exp(x), 1.0))); },
                  vec({3, 4}));
  check_primitive("pow", [&](const Tensor& x) { return sum(pow_scalar(add_scalar(square(x), 1.0), -0.5)); },
                  vec({3, 4}));
  check_primitive("mean", [&](const Tensor& x) { return mean(square(x)); }, vec({3, 4}));
  check_primitive("softmax", [&](const Tensor& x) { return sum(mul(softmax_last(x), weights)); },
                  vec({3, 4}));
  check_primitive("sum_to/expand", [&](const Tensor& x) {
    return sum(square(sub(expand(sum_to(x, {1, 4}), {3, 4}), fixed)));
  }, vec({3, 4}));
  check_primitive("l1 of difference", [&](const Tensor& x) { return sum(abs(sub(x, fixed))); },
                  [&](Rng& r) { return add(fixed, random_off_zero({3, 4}, r)); });
  check_primitive("l2 of parameters", [&](const Tensor& x) { return mul_scalar(sum(square(x)), 0.001); },
                  vec({3, 4}));
  check_primitive("conv input", [&](const Tensor& x) {
    return sum(square(conv_same(x, reshape(weights, {1, 3, 2, 2}))));
  }, vec({2, 3, 5, 4}));
  check_primitive("conv 3d kernel", [&](const Tensor& k) {
    Rng r(1);
    static Tensor in = random_tensor({1, 2, 3, 4, 3}, r);
    return sum(square(conv_same(in, k)));
  }, vec({2, 2, 2, 3, 2}), 20);
  check_primitive("maxpool", [&](const Tensor& x) { return sum(square(maxpool(x, 2))); },
                  vec({1, 2, 4, 5}));
  check_primitive("batchnorm", [&](const Tensor& x) {
    return sum(mul(batchnorm_train(x, Tensor::from({2}, {1.5, 0.5}), Tensor::from({2}, {0.1, -0.1}), 1e-5),
                   reshape(Tensor::from({16}, {1, 2, 3, 4, 5, 6, 7, 8, -1, -2, -3, -4, 0.5, 0.2, 0.3, 0.1}),
                           {2, 2, 2, 2})));
  }, vec({2, 2, 2, 2}));
  check_primitive("dropout", [&](const Tensor& x) {
    Rng r(77);
    return sum(square(dropout(x, 0.5, r)));
  }, vec({3, 4}));
  check_primitive("flatten/reshape", [&](const Tensor& x) { return sum(mul(flatten(x), reshape(weights, {2, 6}))); },
                  vec({2, 3, 2}));
}

TEST_CASE("finite_diff_check examples") {
  DTypeScope f64(DType::F64);
  Rng rng(10);
  Tensor m = random_tensor({4, 4}, rng);
  auto quadratic = [&](const Tensor& x) { return sum(mul(matmul(x, m), x)); };
  CHECK(finite_diff_check(quadratic, random_tensor({1, 4}, rng)).max_rel_error < 1e-8);
  // ReLU away from the kink.
  auto r = finite_diff_check([](const Tensor& x) { return sum(square(relu(x))); },
                             random_off_zero({20}, rng));
  CHECK(r.max_rel_error < 1e-6);
  CHECK_THROWS_AS(finite_diff_check(quadratic, Tensor::zeros({1, 4}, DType::F32)), ContractError);
}

TEST_CASE("checked mode screens non-finite values") {
  REQUIRE(checked_mode());
  CHECK_THROWS_AS(log(Tensor::from({2}, {1.0, -1.0})), NumericError);
  set_checked_mode(false);
  CHECK_NOTHROW(log(Tensor::from({2}, {1.0, -1.0})));
  set_checked_mode(true);
}

TEST_CASE("determinism") {
  auto run = [] {
    Rng rng(42);
    Tensor x = random_tensor({2, 1, 8, 8}, rng, -1, 1, DType::F32);
    Tensor k = random_tensor({4, 1, 4, 4}, rng, -1, 1, DType::F32).set_requires_grad(true);
    auto y = sum(square(maxpool(relu(conv_same(x, k)), 2)));
    return std::make_pair(y.values(), backward(y)[k].values());
  };
  auto a = run();
  auto b = run();
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
}
