#include <gtest/gtest.h>

#include <functional>
#include <random>

#include "odamkit/autograd.hpp"

using namespace odamkit;
using ad::Var;

namespace {

std::vector<double> randv(std::size_t n, std::mt19937& g, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(g);
  return v;
}

// Checks d f / d inputs[k] against central differences for every element.
void check_grad(const std::function<Var(const std::vector<Var>&)>& f, std::vector<ad::Shape> shapes,
                std::vector<std::vector<double>> values, double tol = 1e-6, double h = 1e-6) {
  std::vector<Var> xs;
  for (std::size_t k = 0; k < shapes.size(); ++k) xs.push_back(ad::tensor(shapes[k], values[k], true));
  auto gs = ad::grad(f(xs), xs);
  for (std::size_t k = 0; k < shapes.size(); ++k) {
    for (std::size_t i = 0; i < values[k].size(); ++i) {
      auto eval = [&](double delta) {
        auto v = values;
        v[k][i] += delta;
        std::vector<Var> c;
        for (std::size_t j = 0; j < shapes.size(); ++j) c.push_back(ad::constant(shapes[j], v[j]));
        return f(c).item();
      };
      const double fd = (eval(h) - eval(-h)) / (2 * h);
      ASSERT_NEAR(gs[k].value()[i], fd, tol * std::max(1.0, std::abs(fd))) << "input " << k << " element " << i;
    }
  }
}

// Naive direct convolution.
std::vector<double> conv_oracle(const std::vector<double>& x, int C, int H, int W, const std::vector<double>& w, int O,
                                int k, int stride, int pad) {
  const int Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
  std::vector<double> y(static_cast<std::size_t>(O) * Ho * Wo, 0.0);
  for (int o = 0; o < O; ++o)
    for (int i = 0; i < Ho; ++i)
      for (int j = 0; j < Wo; ++j) {
        double s = 0;
        for (int c = 0; c < C; ++c)
          for (int a = 0; a < k; ++a)
            for (int b = 0; b < k; ++b) {
              const int xi = i * stride + a - pad, xj = j * stride + b - pad;
              if (xi < 0 || xi >= H || xj < 0 || xj >= W) continue;
              s += w[((o * C + c) * k + a) * k + b] * x[(c * H + xi) * W + xj];
            }
        y[(o * Ho + i) * Wo + j] = s;
      }
  return y;
}

}  // namespace

TEST(Autograd, ElementwiseOpsMatchFiniteDifferences) {
  std::mt19937 g(1);
  const ad::Shape s{2, 3, 3};
  auto a = randv(18, g), b = randv(18, g, 0.5, 2.0);
  check_grad([](const std::vector<Var>& x) { return ad::sum(ad::mul(x[0], x[1])); }, {s, s}, {a, b});
  check_grad([](const std::vector<Var>& x) { return ad::sum(ad::sigmoid(x[0])); }, {s}, {a});
  check_grad([](const std::vector<Var>& x) { return ad::sum(ad::log(x[0])); }, {s}, {b});
  check_grad([](const std::vector<Var>& x) { return ad::sum(ad::sqrt(x[0])); }, {s}, {b});
  check_grad([](const std::vector<Var>& x) { return ad::sum(ad::div(x[0], x[1])); }, {s, s}, {a, b});
  check_grad([](const std::vector<Var>& x) { return ad::sum(ad::exp(x[0])); }, {s}, {a});
  check_grad([](const std::vector<Var>& x) { return ad::sum(ad::mul(ad::relu(x[0]), x[1])); }, {s, s}, {a, b});
}

TEST(Autograd, ReshapingOpsMatchFiniteDifferences) {
  std::mt19937 g(2);
  const ad::Shape s{3, 2, 4};
  auto a = randv(24, g), wts = randv(24, g);
  auto weights = ad::constant(s, wts);
  check_grad([&](const std::vector<Var>& x) { return ad::sum(ad::mul(ad::reduce_channels(x[0]), ad::reduce_channels(weights))); },
             {s}, {a});
  check_grad([&](const std::vector<Var>& x) {
    auto sl = ad::slice_channels(x[0], 1, 3);
    return ad::sum(ad::mul(sl, sl));
  }, {s}, {a});
  check_grad([&](const std::vector<Var>& x) { return ad::sum(ad::mul(ad::bias_add(weights, x[0]), weights)); },
             {{3}}, {randv(3, g)});
  check_grad([&](const std::vector<Var>& x) { return ad::mul(ad::select(x[0], 5), ad::select(x[0], 7)); }, {s}, {a});
  check_grad([&](const std::vector<Var>& x) { return ad::sum(ad::scale_by(x[0], ad::select(x[0], 2))); }, {s}, {a});
}

TEST(Autograd, SpatialMapIsLinearAndAdjoint) {
  std::mt19937 g(3);
  ad::LinearMap m;
  m.in_h = 2;
  m.in_w = 3;
  m.out_h = 2;
  m.out_w = 2;
  m.rows = {{{0, 0.5}, {4, 1.0}}, {{1, 2.0}}, {{5, -1.0}, {2, 0.25}}, {}};
  auto maps = std::make_shared<const ad::LinearMapPair>(m);
  auto c = ad::constant({2, 2, 2}, randv(8, g));
  check_grad([&](const std::vector<Var>& x) { return ad::sum(ad::mul(ad::spatial_map(x[0], maps), c)); },
             {{2, 2, 3}}, {randv(12, g)});
}

TEST(Autograd, ConvKernelsMatchDirectOracle) {
  std::mt19937 g(4);
  for (auto [stride, pad, k] : {std::tuple{1, 1, 3}, {2, 1, 3}, {1, 0, 1}, {2, 0, 3}}) {
    const int C = 3, H = 9, W = 7, O = 4;
    auto x = randv(C * H * W, g), w = randv(O * C * k * k, g);
    auto y = ad::conv2d(ad::constant({C, H, W}, x), ad::constant({O, C, k, k}, w), {stride, pad});
    const auto ref = conv_oracle(x, C, H, W, w, O, k, stride, pad);
    ASSERT_EQ(y.value().size(), ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_NEAR(y.value()[i], ref[i], 1e-12);
  }
}

TEST(Autograd, ConvGradientsMatchFiniteDifferences) {
  std::mt19937 g(5);
  for (auto [stride, pad] : {std::pair{1, 1}, {2, 1}}) {
    const ad::Shape xs{2, 6, 5}, ws{3, 2, 3, 3};
    const int Ho = (6 + 2 * pad - 3) / stride + 1, Wo = (5 + 2 * pad - 3) / stride + 1;
    auto c = ad::constant({3, Ho, Wo}, randv(3 * Ho * Wo, g));
    check_grad([&](const std::vector<Var>& v) { return ad::sum(ad::mul(ad::conv2d(v[0], v[1], {stride, pad}), c)); },
               {xs, ws}, {randv(60, g), randv(54, g)});
  }
}

TEST(Autograd, SparseAndDenseBackwardPathsAgree) {
  std::mt19937 g(6);
  const int C = 4, H = 8, W = 8, O = 5, k = 3;
  auto w = ad::tensor({O, C, k, k}, randv(O * C * k * k, g), true);
  auto x = ad::tensor({C, H, W}, randv(C * H * W, g), true);
  auto y = ad::conv2d(x, w, {1, 1});
  // One nonzero output gradient triggers the sparse kernels.
  auto sparse = ad::grad(ad::select(y, 77), {x, w});
  std::vector<double> dense_x(C * H * W, 0.0), dense_w(O * C * k * k, 0.0);
  const int o = 77 / (H * W), i = (77 / W) % H, j = 77 % W;
  for (int c = 0; c < C; ++c)
    for (int a = 0; a < k; ++a)
      for (int b = 0; b < k; ++b) {
        const int xi = i + a - 1, xj = j + b - 1;
        if (xi < 0 || xi >= H || xj < 0 || xj >= W) continue;
        dense_x[(c * H + xi) * W + xj] += w.value()[((o * C + c) * k + a) * k + b];
        dense_w[((o * C + c) * k + a) * k + b] += x.value()[(c * H + xi) * W + xj];
      }
  for (std::size_t n = 0; n < dense_x.size(); ++n) ASSERT_NEAR(sparse[0].value()[n], dense_x[n], 1e-12);
  for (std::size_t n = 0; n < dense_w.size(); ++n) ASSERT_NEAR(sparse[1].value()[n], dense_w[n], 1e-12);
}

TEST(Autograd, SecondOrderThroughConvMatchesFiniteDifferences) {
  // f(w) = || d/dx <c, conv(x, w)> ||^2 depends on w through the input gradient.
  std::mt19937 g(7);
  const ad::Shape xs{2, 5, 5}, ws{3, 2, 3, 3};
  auto xv = randv(50, g);
  auto c = ad::constant({3, 5, 5}, randv(75, g));
  auto m = ad::constant(xs, randv(50, g));
  check_grad(
      [&](const std::vector<Var>& v) {
        auto x = ad::tensor(xs, xv, true);
        ad::EnableGradGuard on(true);
        auto y = ad::sum(ad::mul(ad::relu(ad::conv2d(x, v[0], {1, 1})), c));
        auto gx = ad::grad(y, {x}, true)[0];
        return ad::sum(ad::mul(ad::mul(gx, gx), m));
      },
      {ws}, {randv(54, g)}, 1e-5);
}

TEST(Autograd, SecondOrderThroughSigmoidAndWeightGrad) {
  std::mt19937 g(8);
  const ad::Shape xs{2, 4, 4}, ws{2, 2, 3, 3};
  auto wv = randv(36, g);
  auto c = ad::constant({2, 4, 4}, randv(32, g));
  check_grad(
      [&](const std::vector<Var>& v) {
        auto w = ad::tensor(ws, wv, true);
        ad::EnableGradGuard on(true);
        auto y = ad::sigmoid(ad::select(ad::conv2d(v[0], w, {1, 1}), 9));
        auto gw = ad::grad(y, {w}, true)[0];
        return ad::add(ad::sum(ad::mul(gw, gw)), ad::sum(ad::mul(ad::conv2d(v[0], w, {1, 1}), c)));
      },
      {xs}, {randv(32, g)}, 1e-5);
}

TEST(Autograd, GradStopsAtRequestedNodes) {
  auto x = ad::tensor({2}, {1.0, 2.0}, true);
  auto h = ad::mul(x, x);
  auto y = ad::sum(ad::mul(h, ad::constant({2}, {3.0, 4.0})));
  auto gh = ad::grad(y, {h})[0];
  EXPECT_EQ(gh.value(), (std::vector<double>{3.0, 4.0}));
  auto gx = ad::grad(y, {x})[0];
  EXPECT_EQ(gx.value(), (std::vector<double>{6.0, 16.0}));
}

TEST(Autograd, UnreachedInputGetsZeros) {
  auto x = ad::tensor({3}, {1, 2, 3}, true);
  auto z = ad::tensor({2}, {1, 1}, true);
  auto g = ad::grad(ad::sum(x), {z})[0];
  EXPECT_EQ(g.value(), (std::vector<double>{0, 0}));
}

TEST(Autograd, NoGradGuardRecordsNothing) {
  auto x = ad::tensor({1}, {2.0}, true);
  ad::NoGradGuard ng;
  auto y = ad::mul(x, x);
  EXPECT_FALSE(y.requires_grad());
}
