#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <mtlopt/data.hpp>
#include <mtlopt/linesearch.hpp>

#include "oracles.hpp"
#include "verify.hpp"

using namespace mtlopt;

namespace {

QuadraticSetup toy(std::vector<double> flat_centers, Index dim, double theta0) {
  std::vector<Eigen::VectorXd> centers;
  for (std::size_t i = 0; i < flat_centers.size(); i += static_cast<std::size_t>(dim)) {
    Eigen::VectorXd c(dim);
    for (Index j = 0; j < dim; ++j) c[j] = flat_centers[i + static_cast<std::size_t>(j)];
    centers.push_back(std::move(c));
  }
  return quadratic_model(quadratic_problem(std::move(centers)),
                         Eigen::VectorXd::Constant(dim, theta0));
}

}  // namespace

TEST_CASE("armijo_rhs values and validation") {
  std::vector<double> losses = {0.5}, sq = {1.0}, dots = {1.0};

  // zero margin cases
  for (ArmijoVariant v : {ArmijoVariant::Both, ArmijoVariant::TaskNormOnly,
                          ArmijoVariant::DirectionOnly, ArmijoVariant::ClassicalBoth}) {
    CHECK(armijo_rhs(v, losses, sq, dots, 1.0, 0.0)[0] == 0.5);
    CHECK(armijo_rhs(v, losses, sq, dots, 0.0, 0.1)[0] == 0.5);
  }

  CHECK(armijo_rhs(ArmijoVariant::Both, losses, sq, dots, 1.0, 0.1)[0] ==
        doctest::Approx(0.3).epsilon(1e-15));
  CHECK(armijo_rhs(ArmijoVariant::ClassicalBoth, losses, sq, dots, 1.0, 0.1)[0] ==
        doctest::Approx(0.3).epsilon(1e-15));
  CHECK(armijo_rhs(ArmijoVariant::TaskNormOnly, losses, sq, dots, 1.0, 0.1)[0] ==
        doctest::Approx(0.4).epsilon(1e-15));
  CHECK(armijo_rhs(ArmijoVariant::DirectionOnly, losses, sq, dots, 1.0, 0.1)[0] ==
        doctest::Approx(0.4).epsilon(1e-15));

  CHECK_THROWS_AS(armijo_rhs(ArmijoVariant::Both, losses, sq, dots, -1.0, 0.1), ConfigError);
  CHECK_THROWS_AS(armijo_rhs(ArmijoVariant::Both, losses, sq, dots, 1.0, 1.5), ConfigError);
}

TEST_CASE("line search config validation") {
  LineSearchConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.gamma = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.gamma = 0.5;
  cfg.eps_floor = 2.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("bls accepts the full step on the scalar half-square") {
  // L(theta) = 0.5 theta^2 at theta = 1: candidate L(0) = 0 <= 0.5 - 0.1 = 0.4
  QuadraticSetup setup = toy({0.0}, 1, 1.0);
  LineSearchConfig cfg;
  cfg.variant = ArmijoVariant::ClassicalBoth;
  PassCounter c;
  StepResult res = bls_step(setup.model, setup.batch, cfg, c);
  CHECK(res.eta == 1.0);
  CHECK(res.trials == 1);
  CHECK_FALSE(res.floor_hit);
  CHECK(res.losses_before[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(res.losses_after[0] == 0.0);
  CHECK(res.dir_dots[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(res.task_grad_sqnorms[0] == 0.0);
  CHECK(res.pass_delta == PassCounter{2, 1, 1, 0});
  CHECK(quadratic_point(setup.model)[0] == doctest::Approx(0.0));
}

TEST_CASE("bls at a Pareto stationary point keeps the point and accepts immediately") {
  QuadraticSetup setup = toy({1.0, -1.0}, 1, 0.0);
  LineSearchConfig cfg;
  cfg.variant = ArmijoVariant::ClassicalBoth;
  PassCounter c;
  StepResult res = bls_step(setup.model, setup.batch, cfg, c);
  CHECK(res.trials == 1);
  CHECK(res.eta == cfg.lr_ub);
  CHECK_FALSE(res.floor_hit);
  CHECK(res.losses_after[0] == doctest::Approx(res.losses_before[0]).epsilon(1e-12));
  CHECK(res.losses_after[1] == doctest::Approx(res.losses_before[1]).epsilon(1e-12));
  CHECK(quadratic_point(setup.model)[0] == 0.0);
}

TEST_CASE("bls trial geometry and encoder pass accounting") {
  // beta = 0.9 forces three rejections on the scalar half-square:
  // eta 1, 0.5, 0.25 fail, 0.125 passes
  QuadraticSetup setup = toy({0.0}, 1, 1.0);
  LineSearchConfig cfg;
  cfg.variant = ArmijoVariant::ClassicalBoth;
  cfg.beta = 0.9;
  PassCounter c;
  StepResult res = bls_step(setup.model, setup.batch, cfg, c);
  CHECK(res.trials == 4);
  CHECK(res.eta == 0.125);
  CHECK(res.losses_after[0] == doctest::Approx(0.5 * 0.875 * 0.875).epsilon(1e-12));
  CHECK(res.pass_delta.enc_fwd == 1 + res.trials);
  CHECK(res.pass_delta.enc_bwd == 1);  // T = 1

  double expected = cfg.lr_ub;
  for (int k = 1; k < res.trials; ++k) expected *= cfg.gamma;
  CHECK(res.eta == expected);
}

TEST_CASE("bls requires the classical variant") {
  QuadraticSetup setup = toy({0.0}, 1, 1.0);
  LineSearchConfig cfg;  // defaults to Both
  PassCounter c;
  CHECK_THROWS_AS(bls_step(setup.model, setup.batch, cfg, c), ConfigError);
}

TEST_CASE("fbls worked example: centers +1/-1 from theta 2") {
  QuadraticSetup setup = toy({1.0, -1.0}, 1, 2.0);
  LineSearchConfig cfg;
  cfg.variant = ArmijoVariant::DirectionOnly;
  PassCounter c;
  StepResult res = fbls_step(setup.model, setup.batch, cfg, c);

  // latent gradients (1, 3); min-norm over [1, 3] is 1 with alpha = (1, 0)
  CHECK(res.losses_before[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(res.losses_before[1] == doctest::Approx(4.5).epsilon(1e-12));
  CHECK(res.dir_dots[0] == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(res.dir_dots[1] == doctest::Approx(3.0).epsilon(1e-9));
  CHECK(res.eta == 1.0);
  CHECK(res.trials == 1);
  CHECK(res.losses_after[0] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(res.losses_after[1] == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(res.pass_delta == PassCounter{1, 1, 2, 2});
  CHECK(quadratic_point(setup.model)[0] == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("fbls at a stationary point leaves the model untouched") {
  QuadraticSetup setup = toy({1.0, -1.0}, 1, 0.0);
  LineSearchConfig cfg;
  PassCounter c;
  StepResult res = fbls_step(setup.model, setup.batch, cfg, c);
  CHECK(res.trials == 1);
  CHECK(quadratic_point(setup.model)[0] == 0.0);
  CHECK(res.losses_after == res.losses_before);
}

TEST_CASE("fbls pass accounting is constant in the trial count") {
  for (double beta : {0.1, 0.6, 0.9}) {
    QuadraticSetup setup = toy({0.0, 0.5}, 1, 3.0);
    LineSearchConfig cfg;
    cfg.beta = beta;
    PassCounter c;
    StepResult res = fbls_step(setup.model, setup.batch, cfg, c);
    CHECK(res.pass_delta.enc_fwd == 1);
    CHECK(res.pass_delta.enc_bwd == 1);
    CHECK(res.pass_delta.dec_bwd == 2);
    CHECK(res.pass_delta.dec_fwd == 2 * (res.trials + (res.floor_hit ? 1 : 0)));
  }
}

TEST_CASE("fbls floor: beta = 1 on the half-square can never be satisfied") {
  // 0.5 (theta - eta)^2 <= 0.5 theta^2 - eta * theta^2 fails for every
  // eta > 0 at beta = 1 (the margin equals the entire first-order decrease)
  QuadraticSetup setup = toy({0.0}, 1, 1.0);
  LineSearchConfig cfg;
  cfg.beta = 1.0;
  cfg.eps_floor = 1e-3;
  PassCounter c;
  StepResult res = fbls_step(setup.model, setup.batch, cfg, c);
  CHECK(res.floor_hit);
  CHECK(res.eta == 1e-3);
  CHECK(res.trials == 10);  // eta = 2^-10 < 1e-3 after ten failures
  CHECK(res.eta >= cfg.eps_floor);
  CHECK(res.eta <= cfg.lr_ub);
  // the step still commits at the floor
  CHECK(quadratic_point(setup.model)[0] == doctest::Approx(1.0 - 1e-3).epsilon(1e-12));
}

TEST_CASE("fbls rejects the classical variant") {
  QuadraticSetup setup = toy({0.0}, 1, 1.0);
  LineSearchConfig cfg;
  cfg.variant = ArmijoVariant::ClassicalBoth;
  PassCounter c;
  CHECK_THROWS_AS(fbls_step(setup.model, setup.batch, cfg, c), ConfigError);
}

TEST_CASE("accepted steps re-verify independently") {
  Rng rng(314);
  for (int trial = 0; trial < 20; ++trial) {
    const Index dim = 2 + static_cast<Index>(rng.below(3));
    std::vector<Eigen::VectorXd> centers;
    for (int t = 0; t < 2 + static_cast<int>(rng.below(2)); ++t)
      centers.push_back(oracles::random_vector(rng, dim, -2.0, 2.0));
    Eigen::VectorXd theta0 = oracles::random_vector(rng, dim, -4.0, 4.0);
    ToyProblem problem = quadratic_problem(centers);

    {
      QuadraticSetup setup = quadratic_model(problem, theta0);
      LineSearchConfig cfg;
      cfg.variant = ArmijoVariant::ClassicalBoth;
      MultiTaskModel before = setup.model;
      PassCounter c;
      StepResult res = bls_step(setup.model, setup.batch, cfg, c);
      if (!res.floor_hit) {
        verify::StepAudit audit = verify::audit_bls(before, setup.batch, cfg, res);
        CHECK(audit.armijo_ok);
        CHECK(audit.strict_decrease);  // Both margins, beta > 0, non-degenerate
      }
    }
    {
      QuadraticSetup setup = quadratic_model(problem, theta0);
      LineSearchConfig cfg;
      MultiTaskModel before = setup.model;
      PassCounter c;
      StepResult res = fbls_step(setup.model, setup.batch, cfg, c);
      if (!res.floor_hit) {
        verify::StepAudit audit = verify::audit_fbls(before, setup.batch, cfg, res);
        CHECK(audit.armijo_ok);
        CHECK(audit.strict_decrease);
      }
    }
  }
}

TEST_CASE("every latent variant accepts sound steps on a model with task parameters") {
  Rng rng(2718);
  for (ArmijoVariant variant :
       {ArmijoVariant::Both, ArmijoVariant::TaskNormOnly, ArmijoVariant::DirectionOnly}) {
    std::vector<TaskSpec> specs(2);
    for (auto& s : specs) {
      s.hidden = {4};
      s.out_dim = 2;
      s.loss = LossKind::Mse;
    }
    MultiTaskModel model = MultiTaskModel::make_mlp(5, {6, 3}, Activation::Tanh, specs, 11);
    Batch batch;
    batch.inputs = Tensor({4, 5}, oracles::random_vector(rng, 20));
    batch.labels = {Tensor({4, 2}, oracles::random_vector(rng, 8)),
                    Tensor({4, 2}, oracles::random_vector(rng, 8))};

    LineSearchConfig cfg;
    cfg.variant = variant;
    for (int step = 0; step < 5; ++step) {
      MultiTaskModel before = model;
      PassCounter c;
      StepResult res = fbls_step(model, batch, cfg, c);
      CHECK(res.task_grad_sqnorms[0] > 0.0);  // decoders carry parameters here
      if (!res.floor_hit) {
        verify::StepAudit audit = verify::audit_fbls(before, batch, cfg, res);
        CHECK(audit.armijo_ok);
      }
    }
  }
}

TEST_CASE("fbls drives the quadratic toy to Pareto stationarity") {
  QuadraticSetup setup = toy({1.0, -1.0}, 1, 5.0);
  ToyProblem problem = quadratic_problem({Eigen::VectorXd::Constant(1, 1.0),
                                          Eigen::VectorXd::Constant(1, -1.0)});
  LineSearchConfig cfg;
  double residual = 1.0;
  int steps = 0;
  for (; steps < 500 && residual >= 1e-4; ++steps) {
    PassCounter c;
    fbls_step(setup.model, setup.batch, cfg, c);
    PassCounter probe;
    LatentBatch latent = encode(setup.model, setup.batch, probe);
    auto [lat, task] = latent_grads(setup.model, latent, setup.batch, probe);
    residual = min_norm_fw(lat.grads).vector.norm();
  }
  CHECK(residual < 1e-4);
  const double theta = quadratic_point(setup.model)[0];
  CHECK(theta >= -1.001);
  CHECK(theta <= 1.001);
  CHECK(problem.hull_distance(quadratic_point(setup.model)) <= 1e-3);
}

TEST_CASE("decay_upper_bound schedule") {
  LineSearchConfig cfg;
  cfg.decay = DecaySchedule{0.5, 10};
  CHECK(decay_upper_bound(cfg, 0).lr_ub == 1.0);
  CHECK(decay_upper_bound(cfg, 9).lr_ub == 1.0);
  CHECK(decay_upper_bound(cfg, 10).lr_ub == 0.5);
  CHECK(decay_upper_bound(cfg, 25).lr_ub == 0.25);

  LineSearchConfig plain;
  CHECK(decay_upper_bound(plain, 40).lr_ub == plain.lr_ub);
  CHECK_THROWS_AS(decay_upper_bound(cfg, -1), InputError);
}
