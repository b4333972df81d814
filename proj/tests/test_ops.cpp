#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "medicat/error.hpp"
#include "medicat/gradcheck.hpp"
#include "medicat/tensor.hpp"

using namespace medicat;
using T = Tensor<double>;

namespace {

ScalarFn<double> unary(Tensor<double> (*op)(const Tensor<double>&), std::uint64_t ws) {
  return [op, ws](const std::vector<T>& x) { return weighted_sum(op(x[0]), ws); };
}

}  // namespace

TEST_SUITE("ops") {

TEST_CASE("matmul examples") {
  const auto a = T::from({2, 2}, {1, 2, 3, 4});
  const auto eye = T::from({2, 2}, {1, 0, 0, 1});
  CHECK(testutil::bitwise_equal(matmul(a, eye).values(), a.values()));
  CHECK(matmul(T::from({1, 1}, {2}), T::from({1, 1}, {3})).item() == 6.0);
}

TEST_CASE("shape errors name both shapes") {
  const auto a = T::zeros({2, 3}), b = T::zeros({2, 3});
  try {
    matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2, 3]") != std::string::npos);
    CHECK(msg.find("[2, 3]", msg.find("[2, 3]") + 1) != std::string::npos);
  }
  CHECK_THROWS_AS(add(T::zeros({2}), T::zeros({3})), DimensionError);
  CHECK_THROWS_AS(layer_norm(T::zeros({2, 3}), T::zeros({2}), T::zeros({3})), DimensionError);
}

TEST_CASE("softmax examples") {
  const auto s = softmax(T::from({2}, {0, 0}));
  CHECK(s.values()[0] == 0.5);
  CHECK(s.values()[1] == 0.5);
  const auto t = softmax(T::from({2}, {std::log(2.0), 0}));
  CHECK(t.values()[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(t.values()[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  // Large logits: same result as the shifted input.
  const auto big = softmax(T::from({2}, {1000, 0}));
  const auto shifted = softmax(T::from({2}, {0, -1000}));
  CHECK(std::isfinite(big.values()[0]));
  CHECK(big.values()[0] == shifted.values()[0]);
  CHECK(big.values()[1] == shifted.values()[1]);
}

TEST_CASE("mean of a constant is the constant; axes are removed") {
  const auto c = T::full({3, 4, 5}, 2.5);
  for (std::ptrdiff_t axis : {0, 1, 2, -1}) {
    const auto m = mean(c, axis);
    CHECK(m.rank() == 2);
    for (double v : m.values()) CHECK(v == 2.5);
  }
  CHECK(mean(c, 1).shape() == Shape{3, 5});
}

TEST_CASE("layer_norm of a zero-variance row is the zero vector") {
  const auto x = T::full({2, 6}, 3.0);
  const auto y = layer_norm(x, T::full({6}, 1.0), T::zeros({6}));
  for (double v : y.values()) CHECK(v == 0.0);
}

TEST_CASE("layer_norm normalises each row") {
  const auto x = testutil::rand_tensor({4, 16}, 5, false, 3.0);
  const auto y = layer_norm(x, T::full({16}, 1.0), T::zeros({16}), 0.0);
  for (std::size_t r = 0; r < 4; ++r) {
    double m = 0, v = 0;
    for (std::size_t c = 0; c < 16; ++c) m += y.values()[r * 16 + c];
    m /= 16;
    for (std::size_t c = 0; c < 16; ++c) v += std::pow(y.values()[r * 16 + c] - m, 2);
    CHECK(std::abs(m) < 1e-14);
    CHECK(v / 16 == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("gather, concat, transpose, reshape") {
  const auto a = T::from({2, 2}, {1, 2, 3, 4});
  const auto b = T::from({1, 2}, {5, 6});
  const auto c = concat_rows(a, b);
  CHECK(c.shape() == Shape{3, 2});
  const auto g = gather_rows(c, {2, 0, 2});
  CHECK(testutil::bitwise_equal(g.values(), std::vector<double>{5, 6, 1, 2, 5, 6}));
  const auto t = transpose(a);
  CHECK(testutil::bitwise_equal(t.values(), std::vector<double>{1, 3, 2, 4}));
  CHECK(reshape(a, {4}).shape() == Shape{4});
  CHECK_THROWS_AS(reshape(a, {3}), DimensionError);
  CHECK_THROWS_AS(gather_rows(a, {2}), DimensionError);
}

TEST_CASE("matmul gradient matches finite differences to 1e-6") {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const std::vector<T> in = {testutil::rand_tensor({3, 4}, 10 + s, true), testutil::rand_tensor({4, 2}, 20 + s, true)};
    const ScalarFn<double> f = [](const std::vector<T>& x) { return sum(matmul(x[0], x[1])); };
    CHECK(gradcheck_error(f, in, 1e-5) <= 1e-6);
  }
}

TEST_CASE("gelu gradient matches finite differences to 1e-6") {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const std::vector<T> in = {testutil::rand_tensor({5, 5}, 30 + s, true, 2.0)};
    CHECK(gradcheck_error(unary(&gelu<double>, s), in, 1e-5) <= 1e-6);
  }
}

TEST_CASE("finite-difference suite passes at 64-bit") {
  const auto reports = run_gradcheck_suite({.seeds = 3});
  CHECK(reports.size() >= 9);
  for (const auto& r : reports) {
    CAPTURE(r.op);
    CAPTURE(r.max_error);
    CHECK(r.passed);
  }
}

TEST_CASE("32-bit gradients pass the relaxed tolerance") {
  using F = Tensor<float>;
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto d = testutil::randn(24, 40 + s);
    const std::vector<F> in = {F::from({4, 6}, std::vector<float>(d.begin(), d.end()), true),
                               F::from({6}, std::vector<float>(6, 1.0f), true),
                               F::from({6}, std::vector<float>(6, 0.0f), true)};
    const ScalarFn<float> g = [s](const std::vector<F>& x) {
      return weighted_sum(gelu(layer_norm(softmax(x[0]), x[1], x[2])), s);
    };
    CHECK(gradcheck_error(g, in, 1e-2) <= 1e-2);
  }
}

}  // TEST_SUITE
