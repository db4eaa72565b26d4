#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <mtlopt/direction.hpp>

#include "oracles.hpp"

using namespace mtlopt;

namespace {

Eigen::Vector2d vec2(double a, double b) { return Eigen::Vector2d(a, b); }

std::vector<Eigen::VectorXd> random_grad_set(Rng& rng, int t_count, Eigen::Index dim) {
  std::vector<Eigen::VectorXd> g;
  for (int t = 0; t < t_count; ++t) g.push_back(oracles::random_vector(rng, dim));
  return g;
}

}  // namespace

TEST_CASE("min_norm_2 on orthogonal unit gradients") {
  Direction d = min_norm_2(vec2(1, 0), vec2(0, 1));
  CHECK(d.weights.alpha[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(d.vector[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(d.vector[1] == doctest::Approx(0.5).epsilon(1e-12));

  auto [grid_gamma, grid_f] = oracles::segment_scan(vec2(1, 0), vec2(0, 1));
  CHECK(std::abs(d.weights.alpha[0] - grid_gamma) <= 1e-4);
  CHECK(d.vector.squaredNorm() <= grid_f + 1e-12);
}

TEST_CASE("min_norm_2 degenerate hull") {
  Eigen::VectorXd g = vec2(0.3, -0.7);
  Direction d = min_norm_2(g, g);
  CHECK(d.vector == g);
  CHECK(d.weights.alpha[0] == 1.0);
  CHECK(d.weights.alpha[1] == 0.0);
}

TEST_CASE("min_norm_2 finds the stationary combination") {
  Direction d = min_norm_2(vec2(2, 0), vec2(-1, 0));
  CHECK(d.weights.alpha[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(d.vector.norm() <= 1e-15);

  auto [grid_gamma, grid_f] = oracles::segment_scan(vec2(2, 0), vec2(-1, 0));
  CHECK(std::abs(d.weights.alpha[0] - grid_gamma) <= 1e-4);
  CHECK(d.vector.squaredNorm() <= grid_f + 1e-12);
}

TEST_CASE("min_norm_2 rejects mismatched lengths") {
  CHECK_THROWS_AS(min_norm_2(Eigen::VectorXd::Ones(2), Eigen::VectorXd::Ones(3)), ShapeError);
}

TEST_CASE("min_norm_2 scale covariance") {
  Rng rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    Eigen::VectorXd g1 = oracles::random_vector(rng, 4);
    Eigen::VectorXd g2 = oracles::random_vector(rng, 4);
    const double c = rng.uniform(0.1, 5.0);
    Direction base = min_norm_2(g1, g2);
    Direction scaled = min_norm_2((c * g1).eval(), (c * g2).eval());
    CHECK(std::abs(scaled.weights.alpha[0] - base.weights.alpha[0]) <= 1e-10);
    CHECK((scaled.vector - c * base.vector).lpNorm<Eigen::Infinity>() <= 1e-10 * std::max(1.0, c));
  }
}

TEST_CASE("min_norm_fw single task") {
  std::vector<Eigen::VectorXd> g = {vec2(0.4, -1.2)};
  Direction d = min_norm_fw(g);
  CHECK(d.vector == g[0]);
  CHECK(d.weights.alpha.size() == 1);
  CHECK(d.weights.alpha[0] == 1.0);
}

TEST_CASE("min_norm_fw rejects an empty set") {
  std::vector<Eigen::VectorXd> g;
  CHECK_THROWS_AS(min_norm_fw(g), InputError);
}

TEST_CASE("min_norm_fw three-vertex example against the simplex grid") {
  std::vector<Eigen::VectorXd> g = {vec2(1, 0), vec2(0, 1), vec2(1, 1)};
  Direction d = min_norm_fw(g);
  const double grid = oracles::grid_min_sqnorm(g, 200);
  CHECK(d.vector.squaredNorm() <= grid + 1e-6);
  CHECK(d.vector.squaredNorm() == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(d.vector[0] == doctest::Approx(0.5).epsilon(1e-6));
  CHECK(d.vector[1] == doctest::Approx(0.5).epsilon(1e-6));
}

TEST_CASE("min_norm_fw matches the two-task closed form") {
  Rng rng(77);
  for (int trial = 0; trial < 100; ++trial) {
    const Eigen::Index dim = 2 + static_cast<Eigen::Index>(rng.below(7));
    Eigen::VectorXd g1 = oracles::random_vector(rng, dim);
    Eigen::VectorXd g2 = oracles::random_vector(rng, dim);
    Direction closed = min_norm_2(g1, g2);
    std::vector<Eigen::VectorXd> g = {g1, g2};
    Direction fw = min_norm_fw(g);
    CHECK((fw.vector - closed.vector).lpNorm<Eigen::Infinity>() <= 1e-8);
  }

  std::vector<Eigen::VectorXd> sym = {vec2(1, 0), vec2(0, 1)};
  Direction fw = min_norm_fw(sym);
  Direction closed = min_norm_2(sym[0], sym[1]);
  CHECK((fw.vector - closed.vector).lpNorm<Eigen::Infinity>() <= 1e-8);
}

TEST_CASE("min_norm_fw optimality certificate and simplex weights") {
  Rng rng(99);
  const double tol = 1e-9;
  for (int trial = 0; trial < 200; ++trial) {
    const int t_count = 2 + static_cast<int>(rng.below(2));
    const Eigen::Index dim = 2 + static_cast<Eigen::Index>(rng.below(7));
    auto g = random_grad_set(rng, t_count, dim);
    Direction d = min_norm_fw(g, 250, tol);

    // simplex weights
    CHECK(d.weights.alpha.minCoeff() >= 0.0);
    CHECK(std::abs(d.weights.alpha.sum() - 1.0) <= 1e-9);

    // reported vector is the weighted combination
    Eigen::VectorXd combo = Eigen::VectorXd::Zero(dim);
    for (int t = 0; t < t_count; ++t) combo += d.weights.alpha[t] * g[static_cast<std::size_t>(t)];
    CHECK((d.vector - combo).norm() <= 1e-8 * std::max(1.0, combo.norm()));

    // common-descent certificate
    const double dd = d.vector.squaredNorm();
    for (int t = 0; t < t_count; ++t)
      CHECK(g[static_cast<std::size_t>(t)].dot(d.vector) >= dd - 10.0 * tol);

    // never worse than any vertex or the uniform average
    for (const auto& v : g) CHECK(dd <= v.squaredNorm() + tol);
    Eigen::VectorXd uniform = Eigen::VectorXd::Zero(dim);
    for (const auto& v : g) uniform += v / t_count;
    CHECK(dd <= uniform.squaredNorm() + tol);
  }
}

TEST_CASE("min_norm_fw tracks the brute-force simplex minimum") {
  Rng rng(2024);
  for (int trial = 0; trial < 40; ++trial) {
    const int t_count = 2 + static_cast<int>(rng.below(2));
    const Eigen::Index dim = 2 + static_cast<Eigen::Index>(rng.below(7));
    auto g = random_grad_set(rng, t_count, dim);
    Direction d = min_norm_fw(g);
    const double grid = oracles::grid_min_sqnorm(g, 200);
    CHECK(d.vector.squaredNorm() <= grid + 1e-6);
  }
}

TEST_CASE("pcgrad without conflicts averages the inputs") {
  Rng rng(1);
  std::vector<Eigen::VectorXd> g = {vec2(1, 0.2), vec2(0.5, 0.6)};
  REQUIRE(g[0].dot(g[1]) > 0);
  Direction d = pcgrad(g, rng);
  CHECK((d.vector - 0.5 * (g[0] + g[1])).lpNorm<Eigen::Infinity>() <= 1e-15);
  CHECK(d.weights.alpha[0] == doctest::Approx(0.5));
}

TEST_CASE("pcgrad cancels an antipodal pair") {
  Rng rng(2);
  std::vector<Eigen::VectorXd> g = {vec2(1, 0), vec2(-1, 0)};
  Direction d = pcgrad(g, rng);
  CHECK(d.vector.norm() <= 1e-15);
}

TEST_CASE("pcgrad single task and zero-vector guard") {
  Rng rng(3);
  std::vector<Eigen::VectorXd> one = {vec2(0.3, 0.4)};
  CHECK(pcgrad(one, rng).vector == one[0]);

  std::vector<Eigen::VectorXd> with_zero = {vec2(1, 0), vec2(0, 0)};
  Direction d = pcgrad(with_zero, rng);  // zero g_j skips the projection
  CHECK((d.vector - vec2(0.5, 0)).lpNorm<Eigen::Infinity>() <= 1e-15);
}

// Non-negative alignment between the output and the projected gradients is a
// two-task theorem; three tasks genuinely violate it (see the companion case
// below), so the property runs at T = 2.
TEST_CASE("pcgrad two-task output does not conflict with its projections") {
  Rng rng(404);
  for (int trial = 0; trial < 500; ++trial) {
    const Eigen::Index dim = 2 + static_cast<Eigen::Index>(rng.below(7));
    auto g = random_grad_set(rng, 2, dim);
    // reconstruct the projected pair (order does not matter at T = 2 because
    // projections use the original gradients)
    std::vector<Eigen::VectorXd> proj = g;
    for (int i = 0; i < 2; ++i) {
      const int j = 1 - i;
      const double dot = proj[static_cast<std::size_t>(i)].dot(g[static_cast<std::size_t>(j)]);
      if (dot < 0)
        proj[static_cast<std::size_t>(i)] -=
            (dot / g[static_cast<std::size_t>(j)].squaredNorm()) * g[static_cast<std::size_t>(j)];
    }
    Rng call_rng = rng.split(trial);
    Direction d = pcgrad(g, call_rng);
    for (const auto& p : proj) CHECK(d.vector.dot(p) >= -1e-12);
  }
}

TEST_CASE("pcgrad three-task counterexample to the alignment property") {
  // With this projection order the mean of the projected gradients conflicts
  // with one of them; the guarantee is specific to two tasks.
  std::vector<Eigen::VectorXd> g = {vec2(-0.34413327295756280, 0.51305973380149927),
                                    vec2(0.95750749748647102, 0.72269904836758680),
                                    vec2(-0.39528077314197385, -0.41272106443821888)};
  const int order[3] = {0, 2, 1};
  std::vector<Eigen::VectorXd> proj = g;
  for (int oi = 0; oi < 3; ++oi)
    for (int oj = 0; oj < 3; ++oj) {
      const int i = order[oi], j = order[oj];
      if (i == j) continue;
      const double dot = proj[static_cast<std::size_t>(i)].dot(g[static_cast<std::size_t>(j)]);
      if (dot < 0)
        proj[static_cast<std::size_t>(i)] -=
            (dot / g[static_cast<std::size_t>(j)].squaredNorm()) * g[static_cast<std::size_t>(j)];
    }
  Eigen::VectorXd mean = (proj[0] + proj[1] + proj[2]) / 3.0;
  double min_dot = std::min({mean.dot(proj[0]), mean.dot(proj[1]), mean.dot(proj[2])});
  CHECK(min_dot < -1e-3);
}

TEST_CASE("is_pareto_stationary") {
  std::vector<Eigen::VectorXd> opposed = {vec2(1, 0), vec2(-1, 0)};
  CHECK(is_pareto_stationary(opposed, 1e-6));

  std::vector<Eigen::VectorXd> same = {vec2(1, 0), vec2(1, 0)};
  CHECK_FALSE(is_pareto_stationary(same, 1e-6));

  // quadratic pair with minima at +1 and -1, evaluated at theta = 0:
  // gradients are theta - a = (-1, +1)
  Eigen::VectorXd g1(1), g2(1);
  g1 << -1.0;
  g2 << 1.0;
  std::vector<Eigen::VectorXd> quad = {g1, g2};
  CHECK(is_pareto_stationary(quad, 1e-6));
}
