#pragma once

// Independent test oracles. Nothing here may call into the implementation
// path it is used to check.

#include <Eigen/Core>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include <mtlopt/common.hpp>

namespace oracles {

// Exhaustive simplex-grid minimum of |sum alpha_t g_t|^2 with step 1/k.
// Supports T in {1, 2, 3}.
inline double grid_min_sqnorm(std::span<const Eigen::VectorXd> grads, int k) {
  const int t_count = static_cast<int>(grads.size());
  Eigen::MatrixXd gram(t_count, t_count);
  for (int i = 0; i < t_count; ++i)
    for (int j = 0; j < t_count; ++j) gram(i, j) = grads[i].dot(grads[j]);

  double best = std::numeric_limits<double>::infinity();
  if (t_count == 1) return gram(0, 0);
  if (t_count == 2) {
    for (int i = 0; i <= k; ++i) {
      const double a = static_cast<double>(i) / k, b = 1.0 - a;
      best = std::min(best, a * a * gram(0, 0) + 2 * a * b * gram(0, 1) + b * b * gram(1, 1));
    }
    return best;
  }
  if (t_count == 3) {
    for (int i = 0; i <= k; ++i)
      for (int j = 0; j <= k - i; ++j) {
        const double a = static_cast<double>(i) / k;
        const double b = static_cast<double>(j) / k;
        const double c = 1.0 - a - b;
        best = std::min(best, a * a * gram(0, 0) + b * b * gram(1, 1) + c * c * gram(2, 2) +
                                  2 * (a * b * gram(0, 1) + a * c * gram(0, 2) + b * c * gram(1, 2)));
      }
    return best;
  }
  throw std::invalid_argument("grid_min_sqnorm supports up to 3 tasks");
}

// Best gamma on the segment [g1, g2] by 1e-4-step scan; returns (gamma, f).
inline std::pair<double, double> segment_scan(const Eigen::VectorXd& g1, const Eigen::VectorXd& g2) {
  double best_gamma = 0.0, best = std::numeric_limits<double>::infinity();
  for (int i = 0; i <= 10000; ++i) {
    const double gamma = static_cast<double>(i) / 10000.0;
    const double f = (gamma * g1 + (1.0 - gamma) * g2).squaredNorm();
    if (f < best) {
      best = f;
      best_gamma = gamma;
    }
  }
  return {best_gamma, best};
}

inline Eigen::VectorXd random_vector(mtlopt::Rng& rng, Eigen::Index n, double lo = -1.0,
                                     double hi = 1.0) {
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = rng.uniform(lo, hi);
  return v;
}

}  // namespace oracles
