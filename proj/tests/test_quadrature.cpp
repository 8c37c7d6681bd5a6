#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "skelnet/quadrature.hpp"

using namespace skelnet;

TEST_CASE("Gauss-Hermite weights sum to sqrt(pi)") {
  for (int n : {16, 64, 96}) {
    const QuadratureRule rule = gauss_hermite(n);
    double total = 0.0;
    for (double w : rule.weights) total += w;
    REQUIRE(total == Catch::Approx(std::sqrt(M_PI)).epsilon(1e-13));
  }
}

TEST_CASE("Gauss-Hermite integrates polynomials exactly") {
  // int x^4 e^{-x^2} dx = (3/4) sqrt(pi)
  const QuadratureRule rule = gauss_hermite(16);
  double acc = 0.0;
  for (std::size_t i = 0; i < rule.nodes.size(); ++i) {
    acc += rule.weights[i] * std::pow(rule.nodes[i], 4);
  }
  REQUIRE(acc == Catch::Approx(0.75 * std::sqrt(M_PI)).epsilon(1e-12));
}

TEST_CASE("Gauss-Hermite nodes are exactly symmetric") {
  for (int n : {15, 64}) {
    const QuadratureRule rule = gauss_hermite(n);
    for (int i = 0; i < n; ++i) {
      REQUIRE(rule.nodes[i] == -rule.nodes[n - 1 - i]);
      REQUIRE(rule.weights[i] == rule.weights[n - 1 - i]);
    }
  }
}

TEST_CASE("gaussian_expectation matches normal moments") {
  REQUIRE(gaussian_expectation([](double x) { return x * x; }) == Catch::Approx(1.0).epsilon(1e-12));
  REQUIRE(gaussian_expectation([](double x) { return x * x * x * x; }) ==
          Catch::Approx(3.0).epsilon(1e-12));
  REQUIRE(gaussian_expectation([](double x) { return x; }) == Catch::Approx(0.0).margin(1e-15));
}

TEST_CASE("Gauss-Legendre integrates on a custom interval") {
  const QuadratureRule rule = gauss_legendre(12, 0.0, 1.0);
  double acc = 0.0;
  for (std::size_t i = 0; i < rule.nodes.size(); ++i) {
    acc += rule.weights[i] * std::pow(rule.nodes[i], 3);
  }
  REQUIRE(acc == Catch::Approx(0.25).epsilon(1e-13));
}

TEST_CASE("quadrature rejects nonsense orders") {
  REQUIRE_THROWS_AS(gauss_hermite(0), Error);
  REQUIRE_THROWS_AS(gauss_legendre(-1), Error);
}
