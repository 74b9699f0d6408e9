#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "tact/gradcheck.hpp"
#include "tact/rng.hpp"
#include "tact/tensor.hpp"
#include "test_util.hpp"

using namespace tact;

namespace {

Tensor<double> t2(int m, int n, std::vector<double> v) {
  return Tensor<double>::from_values({m, n}, std::move(v));
}

}  // namespace

TEST_CASE("matmul identity and hand-expanded product") {
  Tape<double> tape;
  auto eye = t2(2, 2, {1, 0, 0, 1});
  auto a = t2(2, 2, {1, 2, 3, 4});
  auto r = matmul(tape, eye, a);
  CHECK(test::bitwise_equal(r, a));

  auto p = matmul(tape, t2(2, 2, {1, 0, 0, 0}), t2(2, 2, {5, 6, 7, 8}));
  CHECK(p.values()[0] == 5.0);
  CHECK(p.values()[1] == 6.0);
  CHECK(p.values()[2] == 0.0);
  CHECK(p.values()[3] == 0.0);
}

TEST_CASE("matmul gradient of sum(a*b) wrt a") {
  Tape<double> tape;
  auto a = Tensor<double>::from_values({1, 2}, {1, 1}, true);
  auto b = Tensor<double>::from_values({2, 1}, {2, 3});
  auto loss = sum_all(tape, matmul(tape, a, b));
  tape.backward(loss);
  REQUIRE(a.has_grad());
  CHECK(a.grad()[0] == doctest::Approx(2.0));
  CHECK(a.grad()[1] == doctest::Approx(3.0));
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tape<double> tape;
  auto a = t2(2, 3, {1, 2, 3, 4, 5, 6});
  auto b = t2(2, 2, {1, 2, 3, 4});
  try {
    matmul(tape, a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[2x2]") != std::string::npos);
  }
}

TEST_CASE("softmax rows: uniform on zeros, hand case, row-stochastic") {
  Tape<double> tape;
  auto z = softmax_rows(tape, Tensor<double>::zeros({1, 4}));
  for (double v : z.values()) CHECK(v == doctest::Approx(0.25));

  auto s = softmax_rows(tape, t2(1, 2, {0.0, std::log(3.0)}));
  CHECK(s.values()[0] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(s.values()[1] == doctest::Approx(0.75).epsilon(1e-12));

  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const int m = 1 + rng.uniform_int(4), p = 1 + rng.uniform_int(6);
    std::vector<double> v(static_cast<std::size_t>(m * p));
    for (auto& x : v) x = rng.uniform(-30, 30);
    auto y = softmax_rows(tape, t2(m, p, v));
    for (int r = 0; r < m; ++r) {
      double sum = 0;
      for (int j = 0; j < p; ++j) {
        const double e = y.values()[static_cast<std::size_t>(r * p + j)];
        CHECK(e > 0.0);
        sum += e;
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
}

TEST_CASE("softmax shift invariance preserves rows and argmax") {
  Tape<double> tape;
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const int p = 2 + rng.uniform_int(5);
    std::vector<double> v(static_cast<std::size_t>(p));
    for (auto& x : v) x = rng.uniform(-3, 3);
    const double c = rng.uniform(-50, 50);
    std::vector<double> shifted = v;
    for (auto& x : shifted) x += c;
    auto y0 = softmax_rows(tape, t2(1, p, v));
    auto y1 = softmax_rows(tape, t2(1, p, shifted));
    CHECK(test::max_abs_diff(y0, y1) < 1e-9);

    int arg_in = 0, arg_out = 0;
    for (int j = 1; j < p; ++j) {
      if (v[static_cast<std::size_t>(j)] > v[static_cast<std::size_t>(arg_in)]) arg_in = j;
      if (y0.values()[static_cast<std::size_t>(j)] > y0.values()[static_cast<std::size_t>(arg_out)]) arg_out = j;
    }
    CHECK(arg_in == arg_out);
  }
}

TEST_CASE("layer_norm hand cases") {
  Tape<double> tape;
  auto gain = Tensor<double>::full({3}, 1.0);
  auto bias = Tensor<double>::zeros({3});

  auto c = layer_norm(tape, Tensor<double>::from_values({3}, {5, 5, 5}), gain, bias, 1e-5);
  for (double v : c.values()) CHECK(v == doctest::Approx(0.0));

  auto n = layer_norm(tape, Tensor<double>::from_values({3}, {1, 2, 3}), gain, bias, 1e-12);
  CHECK(n.values()[0] == doctest::Approx(-1.2247).epsilon(1e-3));
  CHECK(n.values()[1] == doctest::Approx(0.0));
  CHECK(n.values()[2] == doctest::Approx(1.2247).epsilon(1e-3));

  Rng rng(3);
  std::vector<double> v(24);
  for (auto& x : v) x = rng.uniform(-5, 5);
  auto gain4 = Tensor<double>::full({6}, 1.0);
  auto bias4 = Tensor<double>::zeros({6});
  auto y = layer_norm(tape, t2(4, 6, v), gain4, bias4, 1e-5);
  for (int r = 0; r < 4; ++r) {
    double mean = 0;
    for (int j = 0; j < 6; ++j) mean += y.values()[static_cast<std::size_t>(r * 6 + j)];
    CHECK(std::abs(mean / 6.0) < 1e-6);
  }
}

TEST_CASE("relu, concat/split laws") {
  Tape<double> tape;
  auto r = relu(tape, Tensor<double>::from_values({2}, {-1, 2}));
  CHECK(r.values()[0] == 0.0);
  CHECK(r.values()[1] == 2.0);

  auto a = t2(3, 2, {1, 2, 3, 4, 5, 6});
  auto b = t2(3, 4, {9, 8, 7, 6, 5, 4, 3, 2, 1, 0, -1, -2});
  auto cat = concat(tape, {a, b}, 1);
  CHECK(cat.shape() == Shape{3, 6});

  auto back = split(tape, cat, {2, 4}, 1);
  CHECK(test::bitwise_equal(back[0], a));
  CHECK(test::bitwise_equal(back[1], b));

  // Round trip along axis 0 is bitwise too.
  auto x = t2(2, 3, {1.5, -2.25, 3.125, 0.875, -1.0, 2.0});
  auto y = t2(2, 3, {4, 5, 6, 7, 8, 9});
  auto parts = split(tape, concat(tape, {x, y}, 0), {2, 2}, 0);
  CHECK(test::bitwise_equal(parts[0], x));
  CHECK(test::bitwise_equal(parts[1], y));

  CHECK_THROWS_AS(split(tape, cat, {2, 3}, 1), ShapeError);
  CHECK_THROWS_AS(concat(tape, {a, b}, 2), ShapeError);
  CHECK_THROWS_AS(mean_over_axis(tape, a, 5), ShapeError);
}

TEST_CASE("backward: sum gives ones, elementwise square, fan-out accumulates") {
  {
    Tape<double> tape;
    auto x = Tensor<double>::from_values({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    tape.backward(sum_all(tape, x));
    for (double g : x.grad()) CHECK(g == 1.0);
  }
  {
    Tape<double> tape;
    auto x = Tensor<double>::from_values({2}, {1, 2}, true);
    tape.backward(sum_all(tape, mul(tape, x, x)));
    CHECK(x.grad()[0] == doctest::Approx(2.0));
    CHECK(x.grad()[1] == doctest::Approx(4.0));
  }
  {
    Tape<double> tape;
    auto x = Tensor<double>::from_values({2}, {1, 2}, true);
    tape.backward(sum_all(tape, add(tape, x, x)));
    CHECK(x.grad()[0] == doctest::Approx(2.0));
    CHECK(x.grad()[1] == doctest::Approx(2.0));
  }
}

TEST_CASE("backward requires a scalar loss") {
  Tape<double> tape;
  auto x = Tensor<double>::from_values({2}, {1, 2}, true);
  CHECK_THROWS_AS(tape.backward(x), ShapeError);
}

TEST_CASE("parameter gradients accumulate across forward/backward rounds") {
  auto x = Tensor<double>::from_values({2}, {1, 2}, true);
  for (int round = 0; round < 2; ++round) {
    Tape<double> tape;
    tape.backward(sum_all(tape, x));
    tape.clear();
  }
  CHECK(x.grad()[0] == doctest::Approx(2.0));
  CHECK(x.grad()[1] == doctest::Approx(2.0));
  x.clear_grad();
  CHECK(!x.has_grad());
}

TEST_CASE("forward is bitwise deterministic for a fixed seed") {
  auto run = [](std::uint64_t seed) {
    Rng rng(seed);
    std::vector<float> v(12);
    for (auto& x : v) x = static_cast<float>(rng.normal());
    Tape<float> tape;
    auto a = Tensor<float>::from_values({3, 4}, v);
    auto b = softmax_rows(tape, a);
    auto c = matmul(tape, b, transpose_last_two(tape, a));
    return std::vector<float>(c.values().begin(), c.values().end());
  };
  CHECK(run(42) == run(42));
}

TEST_CASE("finite-difference oracle: every op under 1e-4 at 64-bit") {
  GradCheckOptions opts;
  const auto cases = run_gradcheck(opts);
  int total_shapes = 0;
  for (const auto& c : cases) {
    INFO(c.name, " max_rel_err=", c.max_rel_err);
    CHECK(c.max_rel_err < 1e-4);
    total_shapes += c.shapes;
  }
  CHECK(total_shapes >= 100);
}

#ifndef NDEBUG
TEST_CASE("debug builds reject non-finite values") {
  CHECK_THROWS_AS(Tensor<double>::from_values({1}, {std::nan("")}), NumericError);
}
#endif
