#pragma once

#include <optional>
#include <span>
#include <vector>

#include "mtlopt/model.hpp"

namespace mtlopt {

// Which sufficient-decrease margins the Armijo threshold subtracts.
// Both:          eta*beta*(|grad_task|^2 + grad_dir . d)   on the latent rule
// TaskNormOnly:  eta*beta*|grad_task|^2
// DirectionOnly: eta*beta*(grad_dir . d)
// ClassicalBoth: the Both margins with parameter-space inner products (BLS).
enum class ArmijoVariant { Both, TaskNormOnly, DirectionOnly, ClassicalBoth };

struct DecaySchedule {
  double rate = 0.5;
  int period = 10;  // epochs
};

struct LineSearchConfig {
  double beta = 0.1;
  double gamma = 0.5;
  double lr_ub = 1.0;
  double eps_floor = 1e-10;
  ArmijoVariant variant = ArmijoVariant::Both;
  std::optional<DecaySchedule> decay;

  void validate() const;  // throws ConfigError
};

// Outcome of one backtracking step. trials counts the geometric candidates
// eta = lr_ub * gamma^(k-1); when the floor is hit the step commits at
// eps_floor after one extra evaluation. For fbls_step, losses_after are the
// accepted candidate's losses under the frozen-encoder approximation.
struct StepResult {
  double eta = 0.0;
  int trials = 0;
  bool floor_hit = false;
  std::vector<double> losses_before;
  std::vector<double> losses_after;
  std::vector<double> task_grad_sqnorms;
  std::vector<double> dir_dots;
  PassCounter pass_delta;
};

// Per-task acceptance thresholds for the chosen variant.
std::vector<double> armijo_rhs(ArmijoVariant variant, std::span<const double> losses,
                               std::span<const double> task_grad_sqnorms,
                               std::span<const double> dir_dots, double eta, double beta);

// Classical backtracking: the shared direction is the min-norm point of the
// per-task shared gradients, and every trial re-runs the full encoder.
// Requires cfg.variant == ClassicalBoth.
// Cost: enc_fwd = 1 + trials (+1 on floor), enc_bwd = T; dec_fwd = T per trial.
StepResult bls_step(MultiTaskModel& model, const Batch& batch, const LineSearchConfig& cfg,
                    PassCounter& counter);

// Fast backtracking: the latent direction is the min-norm point of the
// per-task latent gradients; trials move the saved base latent, so the
// encoder is frozen during the search. The shared update pulls the accepted
// latent step back through one encoder VJP.
// Cost: enc_fwd = 1 and enc_bwd = 1 regardless of trials; dec_bwd = T;
// dec_fwd = T per trial.
StepResult fbls_step(MultiTaskModel& model, const Batch& batch, const LineSearchConfig& cfg,
                     PassCounter& counter);

// lr_ub * rate^floor(epoch / period); identity when no decay is configured.
LineSearchConfig decay_upper_bound(const LineSearchConfig& cfg, int epoch);

}  // namespace mtlopt
