#include <doctest.h>

#include <cmath>
#include <stdexcept>

#include "ncdpo/optim.hpp"

using namespace ncdpo;

TEST_CASE("first Adam step moves each coordinate by lr against the gradient sign") {
  Tensor p = Tensor::row({1.0, -2.0, 0.5});
  Adam adam = make_adam({0.1});
  adam.step({&p}, {Tensor::row({3.0, -0.01, 0.0})});
  // m_hat = g, v_hat = g^2 after one step
  CHECK(p[0] == doctest::Approx(1.0 - 0.1 * 3.0 / (3.0 + 1e-8)));
  CHECK(p[1] == doctest::Approx(-2.0 + 0.1 * 0.01 / (0.01 + 1e-8)));
  CHECK(p[2] == 0.5);
  CHECK(adam.steps() == 1);
}

TEST_CASE("Adam matches a scalar reference over many steps") {
  AdamConfig c{0.01, 0.8, 0.95, 1e-6, 0.0};
  Tensor p = Tensor::row({2.0});
  Adam adam = make_adam(c);
  double x = 2.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 50; ++t) {
    const double g = 2.0 * x + std::sin(t);
    m = c.beta1 * m + (1 - c.beta1) * g;
    v = c.beta2 * v + (1 - c.beta2) * g * g;
    x -= c.lr * (m / (1 - std::pow(c.beta1, t))) / (std::sqrt(v / (1 - std::pow(c.beta2, t))) + c.eps);
    adam.step({&p}, {Tensor::row({2.0 * p[0] + std::sin(t)})});
    CHECK(p[0] == doctest::Approx(x).epsilon(1e-13));
  }
}

TEST_CASE("decoupled weight decay shrinks parameters with zero gradient") {
  Tensor p = Tensor::row({4.0});
  Adam w = make_adamw({0.1, 0.9, 0.999, 1e-8, 0.5});
  w.step({&p}, {Tensor::row({0.0})});
  CHECK(p[0] == doctest::Approx(4.0 * (1 - 0.05)));
  Tensor q = Tensor::row({4.0});
  Adam plain = make_adam({0.1, 0.9, 0.999, 1e-8, 0.5});
  plain.step({&q}, {Tensor::row({0.0})});
  CHECK(q[0] == 4.0);
}

TEST_CASE("Adam state round-trip continues identically") {
  Tensor a1 = Tensor::row({1.0, 2.0}), b1 = Tensor::matrix(2, 2, {1, 2, 3, 4});
  Adam o1 = make_adam({0.05});
  auto grads = [](const Tensor& a, const Tensor& b) {
    Tensor ga = a, gb = b;
    for (double& v : ga.data()) v = std::cos(v);
    for (double& v : gb.data()) v = v * v - 1.0;
    return std::vector<Tensor>{ga, gb};
  };
  for (int i = 0; i < 3; ++i) o1.step({&a1, &b1}, grads(a1, b1));
  Tensor a2 = a1, b2 = b1;
  Adam o2 = make_adam({0.05});
  o2.load_state(o1.state(), {&a2, &b2});
  CHECK(o2.steps() == 3);
  for (int i = 0; i < 4; ++i) {
    o1.step({&a1, &b1}, grads(a1, b1));
    o2.step({&a2, &b2}, grads(a2, b2));
  }
  CHECK(a1 == a2);
  CHECK(b1 == b2);

  // untouched optimizer: state {0} loads into anything
  Adam fresh = make_adam({});
  CHECK(fresh.state() == std::vector<double>{0.0});
  CHECK_NOTHROW(o2.load_state(fresh.state(), {&a2, &b2}));
  CHECK(o2.steps() == 0);
  CHECK_THROWS_AS(o2.load_state({1.0, 2.0}, {&a2, &b2}), std::invalid_argument);
}

TEST_CASE("Adam rejects mismatched inputs") {
  Tensor p = Tensor::row({1.0, 2.0});
  Adam adam = make_adam({});
  CHECK_THROWS_AS(adam.step({&p}, {}), std::invalid_argument);
  CHECK_THROWS_AS(adam.step({&p}, {Tensor::row({1.0})}), std::invalid_argument);
  adam.step({&p}, {Tensor::row({1.0, 1.0})});
  Tensor q = Tensor::row({1.0});
  CHECK_THROWS_AS(adam.step({&p, &q}, {Tensor::row({1.0, 1.0}), Tensor::row({1.0})}),
                  std::invalid_argument);
}

TEST_CASE("gradient norm clipping") {
  std::vector<Tensor> g{Tensor::row({3.0}), Tensor::row({0.0, 4.0})};
  CHECK(clip_grad_norm(g, 10.0) == doctest::Approx(5.0));
  CHECK(g[0][0] == 3.0);
  CHECK(clip_grad_norm(g, 0.0) == doctest::Approx(5.0));
  CHECK(g[1][1] == 4.0);
  CHECK(clip_grad_norm(g, 1.0) == doctest::Approx(5.0));
  CHECK(g[0][0] == doctest::Approx(0.6));
  CHECK(g[1][1] == doctest::Approx(0.8));
  std::vector<Tensor> bad{Tensor::row({NAN})};
  CHECK(std::isnan(clip_grad_norm(bad, 1.0)));
}
