#pragma once

#include <Eigen/Core>
#include <span>
#include <vector>

#include "mtlopt/common.hpp"

namespace mtlopt {

enum class GradSpace { SharedParam, Latent, TaskParam };

// Simplex weights over tasks: alpha >= 0, sum alpha = 1.
struct SimplexWeights {
  Eigen::VectorXd alpha;
};

// A common-descent vector together with the simplex weights that produced it.
struct Direction {
  Eigen::VectorXd vector;
  SimplexWeights weights;
  GradSpace space = GradSpace::SharedParam;

  double squared_norm() const { return vector.squaredNorm(); }
};

// Min-norm point on the segment [g1, g2]: gamma* = clip(((g2-g1).g2) /
// |g1-g2|^2, 0, 1), direction = gamma* g1 + (1-gamma*) g2. Identical inputs
// return g1 with weights (1, 0).
Direction min_norm_2(const Eigen::VectorXd& g1, const Eigen::VectorXd& g2);

// Min-norm element of the convex hull of the task gradients, found by
// Frank-Wolfe over the simplex with analytic line steps. Each iteration takes
// the better of the toward-vertex step and a pairwise step that shifts weight
// off the worst active vertex; the pairwise step removes the zigzag stall of
// the plain iteration when the optimum sits on a hull face. Terminates when
// the duality gap certifies g_t . d >= |d|^2 - tol for every t, or at
// max_iter.
Direction min_norm_fw(std::span<const Eigen::VectorXd> grads, int max_iter = 250,
                      double tol = 1e-9);

// PCGrad: every gradient is projected away from the gradients it conflicts
// with (negative dot product), in a task order shuffled per call; the
// direction is the mean of the projected gradients. Reported weights are
// uniform.
Direction pcgrad(std::span<const Eigen::VectorXd> grads, Rng& rng);

// True iff the min-norm element of the gradient hull has norm <= tol.
bool is_pareto_stationary(std::span<const Eigen::VectorXd> grads, double tol);

}  // namespace mtlopt
