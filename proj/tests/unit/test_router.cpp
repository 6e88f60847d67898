#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "primroute/binary_io.hpp"
#include "primroute/errors.hpp"
#include "primroute/router.hpp"
#include "test_support.hpp"

using namespace primroute;
using primroute::testing::input_grad_error;
using primroute::testing::random_vector;

namespace {

// Zeroes the gate and strength weights so the heads emit their biases.
Router constant_router(double gate_logit, double raw_strength, std::size_t k = 6, std::size_t d = 8) {
  RouterConfig c;
  c.input_dim = d;
  c.num_primitives = k;
  Router r = Router::initialize(c, 1);
  auto params = r.parameters();
  for (double& v : params[2].mutable_values()) v = 0.0;
  for (double& v : params[3].mutable_values()) v = gate_logit;
  for (double& v : params[4].mutable_values()) v = 0.0;
  for (double& v : params[5].mutable_values()) v = raw_strength;
  return r;
}

PrimitiveLibrary basis(std::size_t k, std::size_t d) {
  PrimitiveLibrary lib;
  lib.layer = 1;
  for (std::size_t i = 0; i < k; ++i) {
    Vec v(d, 0.0);
    v[i] = 1.0;
    lib.vectors.push_back(v);
  }
  return lib;
}

}  // namespace

TEST_SUITE("router") {
  TEST_CASE("threshold is strict") {
    const double logit = std::log(0.69 / 0.31);
    const auto d = constant_router(logit, 1.0).route(std::vector<double>(8, 0.3));
    for (std::size_t i = 0; i < d.p.size(); ++i) {
      CHECK(d.p[i] == doctest::Approx(0.69).epsilon(1e-12));
      CHECK(d.w[i] == 0.0);
    }
    const auto open = constant_router(std::log(0.71 / 0.29), 1.0).route(std::vector<double>(8, 0.3));
    for (double w : open.w) CHECK(w == 1.0);
  }

  TEST_CASE("very negative gate logits close every gate") {
    const auto d = constant_router(-1e3, 1.0).route(std::vector<double>(8, -1.0));
    for (std::size_t i = 0; i < d.p.size(); ++i) {
      CHECK(d.p[i] < 1e-300);
      CHECK(d.w[i] == 0.0);
    }
  }

  TEST_CASE("strength clips to the maximum and to zero") {
    CHECK(constant_router(5.0, 2.5).route(std::vector<double>(8, 0.1)).alpha[0] == 2.0);
    CHECK(constant_router(5.0, -0.4).route(std::vector<double>(8, 0.1)).alpha[0] == 0.0);
    CHECK(constant_router(5.0, 1.25).route(std::vector<double>(8, 0.1)).alpha[0] == 1.25);
  }

  TEST_CASE("sigmoid strength head stays inside the bounds") {
    Router r = constant_router(5.0, 30.0);
    r.mutable_config().strength_head = StrengthHead::kSigmoid;
    const auto a = r.route(std::vector<double>(8, 0.1)).alpha[0];
    CHECK(a > 0.0);
    CHECK(a <= 2.0);
  }

  TEST_CASE("gumbel sigmoid values") {
    CHECK(gumbel_sigmoid(0.0, 1.0, 0.0) == 0.5);
    CHECK(gumbel_sigmoid(0.3, 1e-4, 0.0) > 1.0 - 1e-12);
    CHECK_THROWS(gumbel_sigmoid(0.3, 0.0, 0.0));
    Rng rng(4);
    std::vector<double> noise(5);
    for (auto& n : noise) n = rng.logistic();
    const double err = input_grad_error(
        [&](const Tensor& x) { return sum(mul(gumbel_sigmoid(x, 0.7, noise), x)); },
        primroute::testing::random_tensor({1, 5}, rng));
    CHECK(err < 1e-4);
  }

  TEST_CASE("train-mode routing is seeded") {
    Router r = Router::initialize(RouterConfig{8, 4, 3}, 2);
    const auto h = std::vector<double>(8, 0.5);
    const auto a = r.route(h, RouteMode::kTrain, 11, 0.8);
    const auto b = r.route(h, RouteMode::kTrain, 11, 0.8);
    CHECK(a.w == b.w);
    for (double w : a.w) CHECK((w > 0.0 && w < 1.0));
  }

  TEST_CASE("compose cases") {
    const auto lib = basis(6, 8);
    RoutingDecision none{std::vector<double>(6, 0.1), std::vector<double>(6, 0.0), std::vector<double>(6, 1.0)};
    for (double x : compose(none, lib)) CHECK(x == 0.0);

    RoutingDecision one{std::vector<double>(6, 0.0), {1, 0, 0, 0, 0, 0}, {0.5, 0, 0, 0, 0, 0}};
    const auto v1 = compose(one, lib);
    CHECK(v1[0] == 0.5);
    for (std::size_t i = 1; i < v1.size(); ++i) CHECK(v1[i] == 0.0);

    RoutingDecision two{std::vector<double>(6, 0.0), {1, 1, 0, 0, 0, 0}, {2.0, 1.0, 0.3, 0, 0, 0}};
    const auto v2 = compose(two, lib);
    double n = 0;
    for (double x : v2) n += x * x;
    CHECK(std::abs(std::sqrt(n) - std::sqrt(5.0)) < 1e-12);

    RoutingDecision wrong{{}, {1, 1}, {1, 1}};
    CHECK_THROWS_AS(compose(wrong, lib), DimensionError);
  }

  TEST_CASE("injection arithmetic") {
    Rng rng(6);
    const auto h = random_vector(8, rng);
    CHECK(inject(h, std::vector<double>(8, 0.0)) == h);
    const auto v = random_vector(8, rng);
    const auto moved = inject(h, v);
    double dn = 0, vn = 0;
    for (std::size_t i = 0; i < 8; ++i) {
      dn += (moved[i] - h[i]) * (moved[i] - h[i]);
      vn += v[i] * v[i];
    }
    CHECK(std::sqrt(dn) == doctest::Approx(std::sqrt(vn)).epsilon(1e-12));
    // Subtracting back restores h exactly when the sum is exactly representable.
    std::vector<double> hs(8), vs(8);
    for (std::size_t i = 0; i < 8; ++i) {
      hs[i] = static_cast<double>(i) * 0.25;
      vs[i] = 0.5;
    }
    auto back = inject(hs, vs);
    for (std::size_t i = 0; i < 8; ++i) back[i] -= vs[i];
    CHECK(back == hs);
    CHECK_THROWS_AS(inject(h, std::vector<double>(3, 0.0)), DimensionError);
  }

  TEST_CASE("top1 keeps the largest applied strength") {
    RoutingDecision d{std::vector<double>(3, 0.9), {1, 1, 1}, {0.5, 1.5, 1.5}};
    const auto t = top1_only(d);
    CHECK(t.w == std::vector<double>{0, 1, 0});
  }

  TEST_CASE("checkpoint round trip and binding") {
    Router r = Router::initialize(RouterConfig{8, 4, 3}, 9);
    r.set_library_hash(77);
    const auto path = std::filesystem::temp_directory_path() / "primroute_test_router.bin";
    r.save(path);
    const Router back = Router::load(path, 77);
    Rng rng(1);
    for (int i = 0; i < 100; ++i) {
      const auto h = random_vector(8, rng);
      const auto a = r.route(h), b = back.route(h);
      CHECK(a.p == b.p);
      CHECK(a.w == b.w);
      CHECK(a.alpha == b.alpha);
    }
    CHECK_THROWS_AS(Router::load(path, 78), ProvenanceError);
    auto bytes = read_file_bytes(path);
    bytes.resize(bytes.size() - 9);
    write_file_bytes(path, bytes);
    CHECK_THROWS_AS(Router::load(path, 77), FormatError);
    std::filesystem::remove(path);
  }

  TEST_CASE("router is far smaller than the base model") {
    RouterConfig c;
    const Router r = Router::initialize(c, 1);
    MESSAGE("router parameters: " << r.parameter_count());
    CHECK(r.parameter_count() < 10000);
  }
}
