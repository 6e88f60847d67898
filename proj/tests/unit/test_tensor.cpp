#include <doctest.h>

#include <cmath>
#include <numbers>

#include "primroute/errors.hpp"
#include "primroute/optim.hpp"
#include "primroute/tensor.hpp"
#include "test_support.hpp"

using namespace primroute;
using primroute::testing::input_grad_error;
using primroute::testing::random_tensor;

namespace {

// erf by its Maclaurin series in extended precision; fine for |x| <= 3.
long double erf_series(long double x) {
  long double term = x, sum = x;
  for (int n = 1; n < 200; ++n) {
    term *= -x * x / n;
    sum += term / (2 * n + 1);
  }
  return sum * 2.0L / std::sqrt(std::numbers::pi_v<long double>);
}

}  // namespace

TEST_SUITE("tensor") {
  TEST_CASE("matmul identity and scalar cases") {
    const auto a = matmul(Tensor::matrix(2, 2, {1, 0, 0, 1}), Tensor::matrix(2, 1, {3, 4}));
    CHECK(a.at(0) == 3.0);
    CHECK(a.at(1) == 4.0);
    CHECK(matmul(Tensor::matrix(1, 1, {2}), Tensor::matrix(1, 1, {5})).at(0) == 10.0);
  }

  TEST_CASE("matmul agrees with a triple loop") {
    Rng rng(3);
    const auto a = random_tensor({3, 4}, rng);
    const auto b = random_tensor({4, 2}, rng);
    const auto c = matmul(a, b);
    REQUIRE(c.shape() == Shape{3, 2});
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t j = 0; j < 2; ++j) {
        double s = 0;
        for (std::size_t k = 0; k < 4; ++k) s += a.at(i, k) * b.at(k, j);
        CHECK(std::abs(c.at(i, j) - s) < 1e-12);
      }
    }
  }

  TEST_CASE("matmul rejects mismatched inner dimensions") {
    CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), DimensionError);
  }

  TEST_CASE("pointwise values") {
    CHECK(sigmoid(Tensor::scalar(0)).item() == 0.5);
    CHECK(relu(Tensor::scalar(-3)).item() == 0.0);
    std::vector<double> xs = {-3, -2, -1.5, -0.7, -0.1, 0, 0.3, 1, 2.2, 3};
    const auto g = gelu(Tensor::vector(xs));
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const long double x = xs[i];
      const long double ref = 0.5L * x * (1.0L + erf_series(x / std::sqrt(2.0L)));
      CHECK(std::abs(g.at(i) - static_cast<double>(ref)) < 1e-10);
    }
  }

  TEST_CASE("cross-entropy cases") {
    CHECK(std::abs(softmax_crossentropy(Tensor::matrix(1, 4, {0, 0, 0, 0}), 2).item() - std::log(4.0)) < 1e-12);
    CHECK(softmax_crossentropy(Tensor::matrix(1, 3, {0, 1e3, 0}), 1).item() < 1e-12);
    Rng rng(5);
    const std::vector<int> targets = {1, 0, 4};
    const double err = input_grad_error(
        [&](const Tensor& x) { return softmax_crossentropy(x, targets); }, random_tensor({3, 5}, rng));
    CHECK(err < 1e-6);
  }

  TEST_CASE("backward on simple graphs") {
    Tensor x = Tensor::scalar(3.0);
    x.set_tracked();
    backward(mul(x, x));
    CHECK(x.grad()[0] == doctest::Approx(6.0).epsilon(1e-15));

    Rng rng(7);
    const auto w = random_tensor({4, 3}, rng);
    CHECK(input_grad_error([&](const Tensor& v) { return sum(sigmoid(matmul(w, v))); }, random_tensor({3, 1}, rng)) <
          1e-4);

    Tensor a = Tensor::scalar(2.0), y = Tensor::scalar(5.0);
    a.set_tracked();
    y.set_tracked();
    backward(mul(a, a));
    CHECK(y.mutable_grad()[0] == 0.0);
  }

  TEST_CASE("finite differences") {
    const auto g = finite_difference_grad([](const Tensor& t) { return t.item() * t.item(); }, Tensor::scalar(3.0), 1e-5);
    CHECK(std::abs(g.item() - 6.0) < 1e-8);
    const auto z = finite_difference_grad([](const Tensor&) { return 4.0; }, Tensor::vector({1, 2, 3}), 1e-5);
    for (double v : z.values()) CHECK(v == 0.0);
  }

  TEST_CASE("gradients of composite operations") {
    Rng rng(11);
    const auto gain = random_tensor({1, 6}, rng);
    const auto bias = random_tensor({1, 6}, rng);
    CHECK(input_grad_error([&](const Tensor& x) { return sum(mul(layer_norm(x, gain, bias), x)); },
                           random_tensor({3, 6}, rng)) < 1e-4);
    CHECK(input_grad_error([&](const Tensor& x) { return sum(mul(softmax_rows(x), x)); }, random_tensor({2, 5}, rng)) <
          1e-4);
    const std::vector<int> cols = {2, 0};
    CHECK(input_grad_error([&](const Tensor& x) { return sum(pick(log_softmax_rows(x), cols)); },
                           random_tensor({2, 4}, rng)) < 1e-4);

    const std::vector<std::size_t> segs = {3, 2};
    const auto layout = AttentionLayout::packed_causal(segs);
    const auto k = random_tensor({5, 4}, rng);
    const auto v = random_tensor({5, 4}, rng);
    CHECK(input_grad_error([&](const Tensor& q) { return sum(mul(attention(q, k, v, 2, layout), q)); },
                           random_tensor({5, 4}, rng)) < 1e-4);
  }

  TEST_CASE("sgd and zero-gradient steps") {
    OptimizerConfig sgd;
    sgd.kind = OptimizerKind::kSgd;
    sgd.lr = 0.1;
    std::vector<double> p = {1.0};
    const std::vector<double> g = {1.0};
    optimizer_step(p, g, sgd);
    CHECK(p[0] == doctest::Approx(0.9).epsilon(1e-15));

    std::vector<double> q = {0.5, -2.0};
    const std::vector<double> zero = {0.0, 0.0};
    optimizer_step(q, zero, OptimizerConfig{});
    CHECK(q[0] == 0.5);
    CHECK(q[1] == -2.0);
  }

  TEST_CASE("adam reaches the bottom of a quadratic bowl") {
    Tensor x = Tensor::vector({1.0, -0.5});
    x.set_tracked();
    const auto center = Tensor::vector({0.3, 0.2});
    OptimizerConfig c;
    c.lr = 0.05;
    Optimizer opt({x}, c);
    for (int i = 0; i < 100; ++i) {
      opt.zero_grad();
      const auto d = sub(x, center);
      backward(sum(mul(d, d)));
      opt.step();
    }
    CHECK(std::abs(x.at(0) - 0.3) < 1e-3);
    CHECK(std::abs(x.at(1) - 0.2) < 1e-3);
  }

  TEST_CASE("optimizer refuses non-finite gradients without touching parameters") {
    Tensor x = Tensor::vector({1.0});
    x.set_tracked();
    Optimizer opt({x}, OptimizerConfig{});
    x.mutable_grad()[0] = std::nan("");
    CHECK_THROWS_AS(opt.step(), NumericError);
    CHECK(x.at(0) == 1.0);
  }
}
