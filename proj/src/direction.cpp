#include "mtlopt/direction.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace mtlopt {

namespace {

void check_equal_lengths(std::span<const Eigen::VectorXd> grads) {
  if (grads.empty()) throw InputError("min-norm: empty gradient list");
  const Eigen::Index len = grads[0].size();
  for (const auto& g : grads)
    if (g.size() != len) throw ShapeError("min-norm: gradient lengths differ");
}

Eigen::VectorXd combine(std::span<const Eigen::VectorXd> grads, const Eigen::VectorXd& alpha) {
  Eigen::VectorXd d = Eigen::VectorXd::Zero(grads[0].size());
  for (Eigen::Index t = 0; t < alpha.size(); ++t) d += alpha[t] * grads[static_cast<std::size_t>(t)];
  return d;
}

}  // namespace

Direction min_norm_2(const Eigen::VectorXd& g1, const Eigen::VectorXd& g2) {
  if (g1.size() != g2.size()) throw ShapeError("min_norm_2: vector lengths differ");
  const double denom = (g1 - g2).squaredNorm();
  double gamma;
  if (denom == 0.0) {
    gamma = 1.0;
  } else {
    gamma = std::clamp((g2 - g1).dot(g2) / denom, 0.0, 1.0);
  }
  Direction d;
  d.weights.alpha = Eigen::Vector2d(gamma, 1.0 - gamma);
  d.vector = gamma * g1 + (1.0 - gamma) * g2;
  return d;
}

Direction min_norm_fw(std::span<const Eigen::VectorXd> grads, int max_iter, double tol) {
  check_equal_lengths(grads);
  const int t_count = static_cast<int>(grads.size());

  Direction out;
  if (t_count == 1) {
    out.vector = grads[0];
    out.weights.alpha = Eigen::VectorXd::Ones(1);
    return out;
  }

  // Work in Gram space: every dot product the iteration needs comes from M.
  Eigen::MatrixXd gram(t_count, t_count);
  for (int i = 0; i < t_count; ++i)
    for (int j = i; j < t_count; ++j)
      gram(i, j) = gram(j, i) = grads[static_cast<std::size_t>(i)].dot(grads[static_cast<std::size_t>(j)]);

  Eigen::VectorXd alpha = Eigen::VectorXd::Constant(t_count, 1.0 / t_count);
  Eigen::VectorXd q = gram * alpha;   // q_t = g_t . r
  double f = alpha.dot(q);            // |r|^2

  for (int iter = 0; iter < max_iter; ++iter) {
    int t_fw = 0;
    q.minCoeff(&t_fw);
    const double gap = f - q[t_fw];
    if (gap <= tol) break;

    // Toward-vertex step: line-minimize |gamma r + (1-gamma) g_fw|^2.
    double f_v = f;
    double gamma_v = 1.0;
    {
      const double denom = f - 2.0 * q[t_fw] + gram(t_fw, t_fw);
      if (denom > 0.0) {
        gamma_v = std::clamp((gram(t_fw, t_fw) - q[t_fw]) / denom, 0.0, 1.0);
        f_v = gamma_v * gamma_v * f + 2.0 * gamma_v * (1.0 - gamma_v) * q[t_fw] +
              (1.0 - gamma_v) * (1.0 - gamma_v) * gram(t_fw, t_fw);
      }
    }

    // Pairwise step: move delta of weight from the worst active vertex to
    // the best one.
    int t_aw = -1;
    double worst = -std::numeric_limits<double>::infinity();
    for (int t = 0; t < t_count; ++t)
      if (alpha[t] > 0.0 && q[t] > worst) {
        worst = q[t];
        t_aw = t;
      }
    double f_p = std::numeric_limits<double>::infinity();
    double delta = 0.0;
    if (t_aw >= 0 && t_aw != t_fw) {
      const double dd = gram(t_fw, t_fw) - 2.0 * gram(t_fw, t_aw) + gram(t_aw, t_aw);
      if (dd > 0.0) {
        delta = std::clamp((q[t_aw] - q[t_fw]) / dd, 0.0, alpha[t_aw]);
        f_p = f + 2.0 * delta * (q[t_fw] - q[t_aw]) + delta * delta * dd;
      }
    }

    double f_new;
    if (f_p < f_v) {
      alpha[t_fw] += delta;
      alpha[t_aw] -= delta;
      f_new = f_p;
    } else {
      alpha *= gamma_v;
      alpha[t_fw] += 1.0 - gamma_v;
      f_new = f_v;
    }

    const double improvement = f - f_new;
    q = gram * alpha;
    f = alpha.dot(q);
    if (improvement <= 1e-18 * std::max(1.0, f)) break;  // numerical stall
  }

  // Clean tiny negatives from roundoff and renormalize.
  alpha = alpha.cwiseMax(0.0);
  alpha /= alpha.sum();

  out.vector = combine(grads, alpha);
  out.weights.alpha = std::move(alpha);
  return out;
}

Direction pcgrad(std::span<const Eigen::VectorXd> grads, Rng& rng) {
  check_equal_lengths(grads);
  const std::size_t t_count = grads.size();

  std::vector<std::size_t> order(t_count);
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);

  std::vector<Eigen::VectorXd> projected(grads.begin(), grads.end());
  for (std::size_t i : order) {
    for (std::size_t j : order) {
      if (i == j) continue;
      const double denom = grads[j].squaredNorm();
      if (denom == 0.0) continue;
      const double dot = projected[i].dot(grads[j]);
      if (dot < 0.0) projected[i] -= (dot / denom) * grads[j];
    }
  }

  Direction d;
  d.vector = Eigen::VectorXd::Zero(grads[0].size());
  for (const auto& g : projected) d.vector += g;
  d.vector /= static_cast<double>(t_count);
  d.weights.alpha = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(t_count),
                                              1.0 / static_cast<double>(t_count));
  return d;
}

bool is_pareto_stationary(std::span<const Eigen::VectorXd> grads, double tol) {
  return min_norm_fw(grads).vector.norm() <= tol;
}

}  // namespace mtlopt
