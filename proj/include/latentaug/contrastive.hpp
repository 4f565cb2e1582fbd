#pragma once

// Contrastive-learning math as plain vector operations: InfoNCE, the
// symmetric two-view loss and the momentum (EMA) parameter update.

#include "latentaug/common.hpp"

#include <cmath>

namespace latentaug {

/// -log( exp(u.v+/tau) / (exp(u.v+/tau) + sum_j exp(u.v-_j/tau)) ),
/// evaluated as logsumexp(logits) - logit+ with a max shift.
inline double infonce(const Eigen::Ref<const Vector>& u, const Eigen::Ref<const Vector>& positive,
                      const Eigen::Ref<const Matrix>& negatives, double tau) {
  if (!(tau > 0.0)) throw Error("contrastive", "temperature must be positive");
  if (negatives.rows() < 1) throw Error("contrastive", "need at least one negative");
  if (positive.size() != u.size() || negatives.cols() != u.size())
    throw Error("contrastive", "dimension mismatch");
  const double pos = u.dot(positive) / tau;
  const Vector neg = negatives * u / tau;
  const double mx = std::max(pos, neg.maxCoeff());
  const double sum = std::exp(pos - mx) + (neg.array() - mx).exp().sum();
  return std::max(0.0, mx + std::log(sum) - pos);
}

struct ViewBatch {
  Matrix z1;  // B x d, unit rows
  Matrix z2;  // row-aligned second view
  double temperature = 1.0;

  void validate() const {
    if (z1.rows() < 2) throw Error("contrastive", "batch needs at least 2 rows");
    if (z1.rows() != z2.rows() || z1.cols() != z2.cols()) throw Error("contrastive", "views differ in shape");
    if (!(temperature > 0.0)) throw Error("contrastive", "temperature must be positive");
    for (const Matrix* z : {&z1, &z2})
      for (Eigen::Index i = 0; i < z->rows(); ++i)
        if (std::abs(z->row(i).norm() - 1.0) > 1e-5)
          throw Error("contrastive", "row " + std::to_string(i) + " is not unit-norm");
  }
};

/// Mean InfoNCE of each row of `anchors` against the other view: row i of
/// `others` is the positive, every other row a negative.
inline double directional_contrastive_loss(const Matrix& anchors, const Matrix& others, double tau) {
  const Eigen::Index b = anchors.rows();
  double total = 0.0;
  Matrix negatives(b - 1, anchors.cols());
  for (Eigen::Index i = 0; i < b; ++i) {
    for (Eigen::Index j = 0, r = 0; j < b; ++j)
      if (j != i) negatives.row(r++) = others.row(j);
    total += infonce(anchors.row(i).transpose(), others.row(i).transpose(), negatives, tau);
  }
  return total / static_cast<double>(b);
}

/// [L(z1, z2) + L(z2, z1)] / 2.
inline double symmetric_clp_loss(const ViewBatch& batch) {
  batch.validate();
  return 0.5 * (directional_contrastive_loss(batch.z1, batch.z2, batch.temperature) +
                directional_contrastive_loss(batch.z2, batch.z1, batch.temperature));
}

/// target <- m * target + (1 - m) * online, elementwise.
inline Vector momentum_update(const Eigen::Ref<const Vector>& target, const Eigen::Ref<const Vector>& online,
                              double m) {
  if (target.size() != online.size()) throw Error("contrastive", "parameter length mismatch");
  if (!(m >= 0.0 && m <= 1.0)) throw Error("contrastive", "momentum must lie in [0, 1]");
  return m * target + (1.0 - m) * online;
}

}  // namespace latentaug
