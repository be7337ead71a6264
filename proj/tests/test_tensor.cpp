#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "ofnet/tensor.hpp"

using namespace ofnet;
using TensorD = TensorT<double>;

namespace {

TensorD random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0,
                      double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return TensorD::from(std::move(shape), std::move(v));
}

}  // namespace

TEST_CASE("conv2d identity 1x1") {
  auto x = TensorD::from({1, 1, 1, 1}, {3.25});
  auto w = TensorD::from({1, 1, 1, 1}, {1.0});
  auto b = TensorD::zeros({1});
  ConvSpec s = ConvSpec::same_conv(1, 1, 1);
  auto y = conv2d(x, s, w, b);
  CHECK(y.values()[0] == doctest::Approx(3.25));
}

TEST_CASE("conv2d 3x3 all-ones on constant image") {
  const double c = 0.7;
  auto x = TensorD::full({1, 1, 5, 5}, c);
  auto w = TensorD::full({1, 1, 3, 3}, 1.0);
  auto b = TensorD::zeros({1});
  ConvSpec s = ConvSpec::same_conv(1, 3, 3);
  auto y = conv2d(x, s, w, b);
  REQUIRE(y.shape() == std::vector<int>{1, 1, 5, 5});
  // center pixel sums all nine taps
  CHECK(y.values()[2 * 5 + 2] == doctest::Approx(9 * c));
  // corner sees only four
  CHECK(y.values()[0] == doctest::Approx(4 * c));
}

TEST_CASE("conv2d output size formula") {
  Rng rng(11);
  auto x = random_tensor({2, 3, 13, 9}, rng);
  auto w = random_tensor({4, 3, 3, 3}, rng);
  auto b = random_tensor({4}, rng);
  ConvSpec s;
  s.out_channels = 4;
  s.kernel_h = s.kernel_w = 3;
  s.stride = 2;
  s.dilation = 2;
  s.pad_h = s.pad_w = 2;
  auto y = conv2d(x, s, w, b);
  CHECK(y.dim(2) == (13 + 4 - 5) / 2 + 1);
  CHECK(y.dim(3) == (9 + 4 - 5) / 2 + 1);
}

TEST_CASE("conv2d rejects mismatched channels and non-finite input") {
  Rng rng(5);
  auto x = random_tensor({1, 2, 4, 4}, rng);
  auto w = random_tensor({1, 3, 3, 3}, rng);
  auto b = TensorD::zeros({1});
  CHECK_THROWS_AS(conv2d(x, ConvSpec::same_conv(1, 3, 3), w, b), ConfigError);

  auto bad = TensorD::full({1, 1, 2, 2}, 1.0);
  bad.values()[3] = std::numeric_limits<double>::quiet_NaN();
  auto w1 = TensorD::full({1, 1, 1, 1}, 1.0);
  CHECK_THROWS_AS(conv2d(bad, ConvSpec::same_conv(1, 1, 1), w1, b),
                  NumericError);
}

TEST_CASE("conv2d gradients vs finite differences, dilation 3") {
  Rng rng(42);
  auto x = random_tensor({1, 2, 7, 7}, rng);
  auto w = random_tensor({3, 2, 3, 3}, rng, -0.5, 0.5);
  auto b = random_tensor({3}, rng);
  ConvSpec s = ConvSpec::same_conv(3, 3, 3, 3);

  x.set_requires_grad(true);
  w.set_requires_grad(true);
  b.set_requires_grad(true);
  auto run = [&]() {
    auto y = conv2d(x, s, w, b);
    double acc = 0;
    for (double v : y.values()) acc += v;
    return acc;
  };
  auto loss = sum_all(conv2d(x, s, w, b));
  std::vector<TensorD> params{x, w, b};
  backward(loss, std::span<TensorD>(params));

  for (auto& p : params) {
    std::vector<double> analytic(p.grad().begin(), p.grad().end());
    auto fd = gradcheck::finite_diff(p, run, 1e-5);
    CHECK(gradcheck::rel_err(analytic, fd) < 1e-4);
  }
}

TEST_CASE("conv2d gradients with stride 2 and rectangular kernel") {
  Rng rng(43);
  auto x = random_tensor({1, 2, 9, 8}, rng);
  auto w = random_tensor({2, 2, 3, 5}, rng, -0.5, 0.5);
  auto b = random_tensor({2}, rng);
  ConvSpec s = ConvSpec::same_conv(2, 3, 5);
  s.stride = 2;

  x.set_requires_grad(true);
  w.set_requires_grad(true);
  b.set_requires_grad(true);
  auto run = [&]() {
    auto y = conv2d(x, s, w, b);
    double acc = 0;
    for (double v : y.values()) acc += v;
    return acc;
  };
  auto loss = sum_all(conv2d(x, s, w, b));
  std::vector<TensorD> params{x, w, b};
  backward(loss, std::span<TensorD>(params));
  for (auto& p : params) {
    std::vector<double> analytic(p.grad().begin(), p.grad().end());
    auto fd = gradcheck::finite_diff(p, run, 1e-5);
    CHECK(gradcheck::rel_err(analytic, fd) < 1e-4);
  }
}

TEST_CASE("conv2d linearity in the input") {
  Rng rng(7);
  auto x = random_tensor({1, 2, 6, 6}, rng);
  auto y = random_tensor({1, 2, 6, 6}, rng);
  auto w = random_tensor({3, 2, 3, 3}, rng);
  auto b = TensorD::zeros({3});
  ConvSpec s = ConvSpec::same_conv(3, 3, 3);
  const double alpha = 1.7, beta = -0.3;

  std::vector<double> mix(x.size());
  for (size_t i = 0; i < mix.size(); ++i)
    mix[i] = alpha * x.values()[i] + beta * y.values()[i];
  auto combined = conv2d(TensorD::from({1, 2, 6, 6}, mix), s, w, b);
  auto cx = conv2d(x, s, w, b);
  auto cy = conv2d(y, s, w, b);
  for (size_t i = 0; i < combined.size(); ++i) {
    double expect = alpha * cx.values()[i] + beta * cy.values()[i];
    CHECK(combined.values()[i] == doctest::Approx(expect).epsilon(1e-6));
  }
}

TEST_CASE("pointwise basics") {
  auto x = TensorD::from({4}, {0.0, -3.0, 2.0, -0.5});
  auto sg = sigmoid(x);
  CHECK(sg.values()[0] == doctest::Approx(0.5));
  auto r = relu(x);
  CHECK(r.values()[1] == 0.0);
  CHECK(r.values()[2] == 2.0);
  auto t = pointwise(x, Pointwise::tanh);
  CHECK(t.values()[2] == doctest::Approx(std::tanh(2.0)));
}

TEST_CASE("pointwise gradients vs finite differences") {
  Rng rng(3);
  for (auto fn : {Pointwise::sigmoid, Pointwise::tanh, Pointwise::relu}) {
    auto x = random_tensor({2, 1, 3, 5}, rng, -2.0, 2.0);
    double err = gradcheck::check_input_grad<double>(
        x, [fn](const TensorD& t) { return pointwise(t, fn); });
    CHECK(err < 1e-4);
  }
}

TEST_CASE("bilinear upsample identity and monotone interpolation") {
  auto x = TensorD::from({1, 1, 2, 3}, {1, 2, 3, 4, 5, 6});
  auto same = bilinear_upsample(x, 2, 3);
  for (size_t i = 0; i < x.size(); ++i)
    CHECK(same.values()[i] == x.values()[i]);

  auto ab = TensorD::from({1, 1, 1, 2}, {1.0, 5.0});
  auto up = bilinear_upsample(ab, 1, 4);
  auto v = up.values();
  CHECK(v[0] == doctest::Approx(1.0));
  CHECK(v[3] == doctest::Approx(5.0));
  for (int i = 0; i + 1 < 4; ++i) CHECK(v[i] <= v[i + 1]);
  // nearest samples dominated by their endpoint
  CHECK(v[1] < 0.5 * (1.0 + 5.0));
  CHECK(v[2] > 0.5 * (1.0 + 5.0));
}

TEST_CASE("bilinear upsample rejects shrinking") {
  auto x = TensorD::zeros({1, 1, 4, 4});
  CHECK_THROWS_AS(bilinear_upsample(x, 2, 4), ConfigError);
}

TEST_CASE("bilinear upsample gradient vs finite differences") {
  Rng rng(9);
  auto x = random_tensor({1, 2, 3, 4}, rng);
  double err = gradcheck::check_input_grad<double>(
      x, [](const TensorD& t) { return bilinear_upsample(t, 7, 9); });
  CHECK(err < 1e-4);
}

TEST_CASE("concat_channels shape, inverse slice, gradient split") {
  Rng rng(21);
  auto a = random_tensor({2, 3, 4, 5}, rng);
  auto b = random_tensor({2, 5, 4, 5}, rng);
  auto c = concat_channels(a, b);
  CHECK(c.shape() == std::vector<int>{2, 8, 4, 5});

  auto back_a = slice_channels(c, 0, 3);
  auto back_b = slice_channels(c, 3, 8);
  CHECK(std::equal(back_a.values().begin(), back_a.values().end(),
                   a.values().begin()));
  CHECK(std::equal(back_b.values().begin(), back_b.values().end(),
                   b.values().begin()));

  a.set_requires_grad(true);
  b.set_requires_grad(true);
  auto loss = sum_all(concat_channels(a, b));
  std::vector<TensorD> params{a, b};
  backward(loss, std::span<TensorD>(params));
  for (auto& p : params)
    for (double g : p.grad()) CHECK(g == 1.0);

  auto bad = TensorD::zeros({2, 3, 9, 5});
  CHECK_THROWS_AS(concat_channels(a, bad), ConfigError);
}

TEST_CASE("backward on sum and half square norm") {
  Rng rng(1);
  auto p = random_tensor({3, 4}, rng);
  p.set_requires_grad(true);
  std::vector<TensorD> params{p};

  auto l1 = sum_all(p);
  backward(l1, std::span<TensorD>(params));
  for (double g : p.grad()) CHECK(g == 1.0);

  auto l2 = scale(sum_all(mul(p, p)), 0.5);
  backward(l2, std::span<TensorD>(params));
  for (size_t i = 0; i < p.size(); ++i)
    CHECK(p.grad()[i] == doctest::Approx(p.values()[i]));
}

TEST_CASE("backward rejects non-scalar loss, zeroes unreachable params") {
  Rng rng(2);
  auto p = random_tensor({2, 2}, rng);
  p.set_requires_grad(true);
  auto q = random_tensor({2, 2}, rng);
  q.set_requires_grad(true);

  auto vec = add(p, p);
  std::vector<TensorD> params{p, q};
  CHECK_THROWS_AS(backward(vec, std::span<TensorD>(params)), ConfigError);

  auto loss = sum_all(mul(p, p));
  backward(loss, std::span<TensorD>(params));
  for (double g : q.grad()) CHECK(g == 0.0);
  bool any = false;
  for (double g : p.grad()) any = any || g != 0.0;
  CHECK(any);
}

TEST_CASE("optimizer: zero gradient leaves parameters unchanged") {
  auto p = TensorT<float>::from({3}, {1.0f, -2.0f, 3.0f});
  p.set_requires_grad(true);
  std::vector<TensorT<float>> params{p};
  OptimState<float> st;
  st.learning_rate = 0.1;
  st.weight_decay = 0.0;
  p.node()->ensure_grad();
  optimizer_step(std::span<TensorT<float>>(params), st);
  CHECK(p.values()[0] == 1.0f);
  CHECK(p.values()[1] == -2.0f);
  CHECK(p.values()[2] == 3.0f);
}

TEST_CASE("optimizer: quadratic descent is monotone") {
  auto w = TensorT<float>::from({1}, {1.0f});
  w.set_requires_grad(true);
  std::vector<TensorT<float>> params{w};
  OptimState<float> st;
  st.learning_rate = 0.05;
  double prev = std::fabs(w.values()[0]);
  for (int i = 0; i < 15; ++i) {
    auto loss = mul(w, w);
    backward(loss, std::span<TensorT<float>>(params));
    optimizer_step(std::span<TensorT<float>>(params), st);
    double cur = std::fabs(w.values()[0]);
    CHECK(cur < prev);
    prev = cur;
  }
}

TEST_CASE("optimizer: 20 steps halve a least squares residual") {
  // min ||A w - y||^2 with A 6x4; residual recorded as a regression check.
  Rng rng(77);
  const int m = 6, n = 4;
  std::vector<double> A(m * n), y(m);
  for (auto& v : A) v = rng.uniform(-1, 1);
  for (auto& v : y) v = rng.uniform(-1, 1);

  auto w = TensorT<float>::zeros({n});
  w.set_requires_grad(true);
  std::vector<TensorT<float>> params{w};
  OptimState<float> st;
  st.learning_rate = 0.1;

  auto residual = [&]() {
    double s = 0;
    for (int i = 0; i < m; ++i) {
      double r = -y[i];
      for (int j = 0; j < n; ++j) r += A[i * n + j] * w.values()[j];
      s += r * r;
    }
    return s;
  };
  double initial = residual();
  for (int it = 0; it < 20; ++it) {
    // grad computed by hand: 2 A^T (A w - y)
    auto loss = TensorT<float>::zeros({1});
    w.node()->ensure_grad();
    std::fill(w.node()->grad.begin(), w.node()->grad.end(), 0.0f);
    for (int i = 0; i < m; ++i) {
      double r = -y[i];
      for (int j = 0; j < n; ++j) r += A[i * n + j] * w.values()[j];
      for (int j = 0; j < n; ++j)
        w.node()->grad[j] += float(2.0 * A[i * n + j] * r);
    }
    optimizer_step(std::span<TensorT<float>>(params), st);
  }
  CHECK(residual() <= 0.5 * initial);
}

TEST_CASE("determinism: same seed gives identical tensors") {
  Rng a(123), b(123);
  auto t1 = TensorT<float>::randn({32}, a, 0.1);
  auto t2 = TensorT<float>::randn({32}, b, 0.1);
  CHECK(std::equal(t1.values().begin(), t1.values().end(),
                   t2.values().begin()));
}
