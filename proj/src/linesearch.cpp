#include "mtlopt/linesearch.hpp"

#include <cmath>
#include <string>

namespace mtlopt {

namespace {

bool all_within(std::span<const double> losses, std::span<const double> rhs) {
  for (std::size_t t = 0; t < losses.size(); ++t)
    if (!(losses[t] <= rhs[t])) return false;
  return true;
}

}  // namespace

void LineSearchConfig::validate() const {
  if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("beta must lie in [0, 1]");
  if (!(gamma > 0.0 && gamma < 1.0)) throw ConfigError("gamma must lie in (0, 1)");
  if (!(lr_ub > 0.0)) throw ConfigError("lr_ub must be positive");
  if (!(eps_floor > 0.0 && eps_floor < lr_ub))
    throw ConfigError("eps_floor must satisfy 0 < eps_floor < lr_ub");
  if (decay) {
    if (!(decay->rate > 0.0 && decay->rate < 1.0)) throw ConfigError("decay rate must lie in (0, 1)");
    if (decay->period < 1) throw ConfigError("decay period must be >= 1");
  }
}

std::vector<double> armijo_rhs(ArmijoVariant variant, std::span<const double> losses,
                               std::span<const double> task_grad_sqnorms,
                               std::span<const double> dir_dots, double eta, double beta) {
  if (!(eta >= 0.0)) throw ConfigError("armijo_rhs: eta must be non-negative");
  if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("armijo_rhs: beta must lie in [0, 1]");
  if (losses.size() != task_grad_sqnorms.size() || losses.size() != dir_dots.size())
    throw ShapeError("armijo_rhs: per-task arrays differ in length");

  std::vector<double> rhs(losses.size());
  for (std::size_t t = 0; t < losses.size(); ++t) {
    switch (variant) {
      case ArmijoVariant::Both:
      case ArmijoVariant::ClassicalBoth:
        rhs[t] = losses[t] - eta * beta * task_grad_sqnorms[t] - eta * beta * dir_dots[t];
        break;
      case ArmijoVariant::TaskNormOnly:
        rhs[t] = losses[t] - eta * beta * task_grad_sqnorms[t];
        break;
      case ArmijoVariant::DirectionOnly:
        rhs[t] = losses[t] - eta * beta * dir_dots[t];
        break;
    }
  }
  return rhs;
}

StepResult bls_step(MultiTaskModel& model, const Batch& batch, const LineSearchConfig& cfg,
                    PassCounter& counter) {
  cfg.validate();
  if (cfg.variant != ArmijoVariant::ClassicalBoth)
    throw ConfigError("bls_step requires the ClassicalBoth variant");

  const PassCounter start = counter;
  const Index t_count = model.task_count();

  FullGrads grads = shared_and_task_grads(model, batch, counter);
  Direction dir = min_norm_fw(grads.shared.grads);
  dir.space = GradSpace::SharedParam;

  StepResult res;
  res.losses_before = grads.shared.losses;
  res.task_grad_sqnorms.resize(static_cast<std::size_t>(t_count));
  res.dir_dots.resize(static_cast<std::size_t>(t_count));
  for (Index t = 0; t < t_count; ++t) {
    res.task_grad_sqnorms[static_cast<std::size_t>(t)] =
        grads.task.grads[static_cast<std::size_t>(t)].squaredNorm();
    res.dir_dots[static_cast<std::size_t>(t)] =
        grads.shared.grads[static_cast<std::size_t>(t)].dot(dir.vector);
  }

  auto make_candidate = [&](double eta) {
    MultiTaskModel cand = model;
    apply_step(cand, StepSpace::shared(), dir.vector, eta);
    for (Index t = 0; t < t_count; ++t)
      apply_step(cand, StepSpace::task_block(static_cast<int>(t)),
                 grads.task.grads[static_cast<std::size_t>(t)], eta);
    return cand;
  };

  double eta = cfg.lr_ub;
  while (true) {
    res.trials += 1;
    MultiTaskModel cand = make_candidate(eta);
    std::vector<double> cand_losses = task_losses(cand, batch, counter);
    std::vector<double> rhs =
        armijo_rhs(cfg.variant, res.losses_before, res.task_grad_sqnorms, res.dir_dots, eta, cfg.beta);
    if (all_within(cand_losses, rhs)) {
      model = std::move(cand);
      res.eta = eta;
      res.losses_after = std::move(cand_losses);
      break;
    }
    eta *= cfg.gamma;
    if (eta < cfg.eps_floor) {
      MultiTaskModel fallback = make_candidate(cfg.eps_floor);
      res.losses_after = task_losses(fallback, batch, counter);
      model = std::move(fallback);
      res.eta = cfg.eps_floor;
      res.floor_hit = true;
      break;
    }
  }

  res.pass_delta = counter - start;
  return res;
}

StepResult fbls_step(MultiTaskModel& model, const Batch& batch, const LineSearchConfig& cfg,
                     PassCounter& counter) {
  cfg.validate();
  if (cfg.variant == ArmijoVariant::ClassicalBoth)
    throw ConfigError("fbls_step requires a latent-space variant");

  const PassCounter start = counter;
  const Index t_count = model.task_count();

  LatentBatch latent = encode(model, batch, counter);
  auto [lat, task] = latent_grads(model, latent, batch, counter);
  Direction dir = min_norm_fw(lat.grads);
  dir.space = GradSpace::Latent;

  StepResult res;
  res.losses_before = lat.losses;
  res.task_grad_sqnorms.resize(static_cast<std::size_t>(t_count));
  res.dir_dots.resize(static_cast<std::size_t>(t_count));
  for (Index t = 0; t < t_count; ++t) {
    res.task_grad_sqnorms[static_cast<std::size_t>(t)] =
        task.grads[static_cast<std::size_t>(t)].squaredNorm();
    res.dir_dots[static_cast<std::size_t>(t)] =
        lat.grads[static_cast<std::size_t>(t)].dot(dir.vector);
  }

  const Eigen::VectorXd z_base = latent.z.flat();

  // Trials score candidate task heads at the shifted base latent; the
  // encoder stays frozen throughout the search.
  auto trial_losses = [&](double eta) {
    Tensor z_cand(latent.z.shape(), z_base - eta * dir.vector);
    std::vector<TaskHead> heads;
    heads.reserve(static_cast<std::size_t>(t_count));
    for (Index t = 0; t < t_count; ++t)
      heads.push_back(stepped_head(model.tasks()[static_cast<std::size_t>(t)],
                                   task.grads[static_cast<std::size_t>(t)], eta));
    return decoder_losses(heads, z_cand, batch, counter);
  };

  double eta = cfg.lr_ub;
  while (true) {
    res.trials += 1;
    std::vector<double> cand_losses = trial_losses(eta);
    std::vector<double> rhs =
        armijo_rhs(cfg.variant, res.losses_before, res.task_grad_sqnorms, res.dir_dots, eta, cfg.beta);
    if (all_within(cand_losses, rhs)) {
      res.eta = eta;
      res.losses_after = std::move(cand_losses);
      break;
    }
    eta *= cfg.gamma;
    if (eta < cfg.eps_floor) {
      res.eta = cfg.eps_floor;
      res.losses_after = trial_losses(cfg.eps_floor);
      res.floor_hit = true;
      break;
    }
  }

  // Commit: task blocks at the accepted step, then the shared block through
  // the encoder VJP of the latent direction.
  for (Index t = 0; t < t_count; ++t)
    apply_step(model, StepSpace::task_block(static_cast<int>(t)),
               task.grads[static_cast<std::size_t>(t)], res.eta);
  Eigen::VectorXd pullback = encoder_vjp(model, latent, dir.vector, counter);
  apply_step(model, StepSpace::latent_shared(), pullback, res.eta);

  res.pass_delta = counter - start;
  return res;
}

LineSearchConfig decay_upper_bound(const LineSearchConfig& cfg, int epoch) {
  if (epoch < 0) throw InputError("decay_upper_bound: epoch must be non-negative");
  if (!cfg.decay) return cfg;
  LineSearchConfig out = cfg;
  out.lr_ub = cfg.lr_ub * std::pow(cfg.decay->rate, epoch / cfg.decay->period);
  return out;
}

}  // namespace mtlopt
