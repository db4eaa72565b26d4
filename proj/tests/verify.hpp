#pragma once

// Independent re-verification of committed line-search steps: everything is
// recomputed from a pre-step model snapshot with fresh counters, and the
// Armijo inequality is re-checked against the accepted step size.

#include <mtlopt/linesearch.hpp>

namespace verify {

using namespace mtlopt;

struct StepAudit {
  bool armijo_ok = true;           // inequality holds for every task
  bool strict_decrease = true;     // candidate losses strictly below base
  double worst_violation = 0.0;    // max (lhs - rhs) / max(1, |rhs|)
};

inline StepAudit audit_bls(const MultiTaskModel& before, const Batch& batch,
                           const LineSearchConfig& cfg, const StepResult& res,
                           double rel_tol = 1e-9) {
  StepAudit audit;
  PassCounter c;
  FullGrads grads = shared_and_task_grads(before, batch, c);
  Direction dir = min_norm_fw(grads.shared.grads);
  const Index t_count = before.task_count();

  std::vector<double> sq(static_cast<std::size_t>(t_count)), dots(static_cast<std::size_t>(t_count));
  for (Index t = 0; t < t_count; ++t) {
    sq[static_cast<std::size_t>(t)] = grads.task.grads[static_cast<std::size_t>(t)].squaredNorm();
    dots[static_cast<std::size_t>(t)] = grads.shared.grads[static_cast<std::size_t>(t)].dot(dir.vector);
  }

  MultiTaskModel cand = before;
  apply_step(cand, StepSpace::shared(), dir.vector, res.eta);
  for (Index t = 0; t < t_count; ++t)
    apply_step(cand, StepSpace::task_block(static_cast<int>(t)),
               grads.task.grads[static_cast<std::size_t>(t)], res.eta);
  std::vector<double> lhs = task_losses(cand, batch, c);
  std::vector<double> rhs =
      armijo_rhs(cfg.variant, grads.shared.losses, sq, dots, res.eta, cfg.beta);

  for (Index t = 0; t < t_count; ++t) {
    const auto ts = static_cast<std::size_t>(t);
    const double slack = rel_tol * std::max(1.0, std::abs(rhs[ts]));
    if (lhs[ts] > rhs[ts] + slack) audit.armijo_ok = false;
    audit.worst_violation =
        std::max(audit.worst_violation, (lhs[ts] - rhs[ts]) / std::max(1.0, std::abs(rhs[ts])));
    if (!(lhs[ts] < grads.shared.losses[ts])) audit.strict_decrease = false;
  }
  return audit;
}

inline StepAudit audit_fbls(const MultiTaskModel& before, const Batch& batch,
                            const LineSearchConfig& cfg, const StepResult& res,
                            double rel_tol = 1e-9) {
  StepAudit audit;
  PassCounter c;
  LatentBatch latent = encode(before, batch, c);
  auto [lat, task] = latent_grads(before, latent, batch, c);
  Direction dir = min_norm_fw(lat.grads);
  const Index t_count = before.task_count();

  std::vector<double> sq(static_cast<std::size_t>(t_count)), dots(static_cast<std::size_t>(t_count));
  for (Index t = 0; t < t_count; ++t) {
    sq[static_cast<std::size_t>(t)] = task.grads[static_cast<std::size_t>(t)].squaredNorm();
    dots[static_cast<std::size_t>(t)] = lat.grads[static_cast<std::size_t>(t)].dot(dir.vector);
  }

  Tensor z_cand(latent.z.shape(), latent.z.flat() - res.eta * dir.vector);
  std::vector<TaskHead> heads;
  for (Index t = 0; t < t_count; ++t)
    heads.push_back(stepped_head(before.tasks()[static_cast<std::size_t>(t)],
                                 task.grads[static_cast<std::size_t>(t)], res.eta));
  std::vector<double> lhs = decoder_losses(heads, z_cand, batch, c);
  std::vector<double> rhs = armijo_rhs(cfg.variant, lat.losses, sq, dots, res.eta, cfg.beta);

  for (Index t = 0; t < t_count; ++t) {
    const auto ts = static_cast<std::size_t>(t);
    const double slack = rel_tol * std::max(1.0, std::abs(rhs[ts]));
    if (lhs[ts] > rhs[ts] + slack) audit.armijo_ok = false;
    audit.worst_violation =
        std::max(audit.worst_violation, (lhs[ts] - rhs[ts]) / std::max(1.0, std::abs(rhs[ts])));
    if (!(lhs[ts] < lat.losses[ts])) audit.strict_decrease = false;
  }
  return audit;
}

}  // namespace verify
