#pragma once

// Base learners fitted per meta-task: nearest centroid, multinomial logistic
// regression and one-vs-rest ridge. All fits are deterministic.

#include "latentaug/common.hpp"

#include <cmath>
#include <deque>
#include <map>
#include <set>

namespace latentaug {

namespace detail {

inline std::vector<ClassId> sorted_classes(const Labels& y) {
  std::set<ClassId> s(y.begin(), y.end());
  return {s.begin(), s.end()};
}

inline std::vector<int> class_indices(const Labels& y, const std::vector<ClassId>& classes) {
  std::vector<int> idx(y.size());
  for (std::size_t i = 0; i < y.size(); ++i)
    idx[i] = static_cast<int>(std::lower_bound(classes.begin(), classes.end(), y[i]) - classes.begin());
  return idx;
}

inline void check_fit_input(const Matrix& x, const Labels& y, const char* who) {
  if (x.rows() == 0 || y.empty()) throw Error("classifiers", std::string(who) + ": empty input");
  if (static_cast<std::size_t>(x.rows()) != y.size())
    throw Error("classifiers", std::string(who) + ": features and labels differ in length");
  if (!x.allFinite()) throw Error("classifiers", std::string(who) + ": non-finite features");
}

inline void check_query(const Matrix& q, Eigen::Index dim) {
  if (q.cols() != dim)
    throw Error("classifiers", "dimension mismatch: queries have " + std::to_string(q.cols()) +
                                   " columns, model expects " + std::to_string(dim));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Nearest centroid

struct CentroidModel {
  std::vector<ClassId> classes;  // ascending
  Matrix centroids;              // one row per class
};

inline CentroidModel fit_nearest_centroid(const Matrix& x, const Labels& y) {
  detail::check_fit_input(x, y, "fit_nearest_centroid");
  CentroidModel m;
  m.classes = detail::sorted_classes(y);
  const auto idx = detail::class_indices(y, m.classes);
  const auto k = static_cast<Eigen::Index>(m.classes.size());
  m.centroids = Matrix::Zero(k, x.cols());
  Vector counts = Vector::Zero(k);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    m.centroids.row(idx[i]) += x.row(static_cast<Eigen::Index>(i));
    counts(idx[i]) += 1.0;
  }
  m.centroids.array().colwise() /= counts.array();
  return m;
}

inline Labels predict_nearest_centroid(const CentroidModel& m, const Matrix& q) {
  detail::check_query(q, m.centroids.cols());
  Labels out(static_cast<std::size_t>(q.rows()));
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    const Vector d2 = (m.centroids.rowwise() - q.row(i)).rowwise().squaredNorm();
    out[static_cast<std::size_t>(i)] = m.classes[static_cast<std::size_t>(argmin_lowest(d2))];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear models

enum class LinearKind { Logistic, Ridge };

struct LinearModel {
  Matrix weights;  // classes x d
  Vector bias;
  LinearKind kind = LinearKind::Ridge;
  double strength = 1.0;
  std::vector<ClassId> classes;  // ascending, one per weight row
  // Logistic fit diagnostics.
  int iterations = 0;
  bool converged = false;
  double gradient_inf_norm = 0.0;
  std::vector<double> objective_history;
};

inline Labels predict_linear(const LinearModel& m, const Matrix& q) {
  detail::check_query(q, m.weights.cols());
  const Matrix scores = (q * m.weights.transpose()).rowwise() + m.bias.transpose();
  Labels out(static_cast<std::size_t>(q.rows()));
  for (Eigen::Index i = 0; i < q.rows(); ++i)
    out[static_cast<std::size_t>(i)] = m.classes[static_cast<std::size_t>(argmax_lowest(scores.row(i)))];
  return out;
}

/// Value and gradient of the multinomial logistic objective
///   J(W, b) = (1/n) * [ sum_i CE_i + (l2/2) * ||W||_F^2 ]
/// with parameters packed as a classes x (d+1) matrix [W | b]. The bias is
/// not penalized.
struct LogisticObjective {
  const Matrix& x;
  const std::vector<int>& y;
  Eigen::Index classes;
  double l2;

  double operator()(const Matrix& theta, Matrix* grad) const {
    const Eigen::Index n = x.rows(), d = x.cols();
    const auto w = theta.leftCols(d);
    const auto b = theta.col(d);
    Matrix logits = (x * w.transpose()).rowwise() + b.transpose();
    double loss = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double mx = logits.row(i).maxCoeff();
      logits.row(i).array() -= mx;
      const double lse = std::log(logits.row(i).array().exp().sum());
      loss += lse - logits(i, y[static_cast<std::size_t>(i)]);
      logits.row(i) = (logits.row(i).array() - lse).exp().matrix();  // probabilities
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    const double value = inv_n * (loss + 0.5 * l2 * w.squaredNorm());
    if (grad) {
      for (Eigen::Index i = 0; i < n; ++i) logits(i, y[static_cast<std::size_t>(i)]) -= 1.0;
      grad->resize(classes, d + 1);
      grad->leftCols(d) = inv_n * (logits.transpose() * x + l2 * w);
      grad->col(d) = inv_n * logits.colwise().sum().transpose();
    }
    return value;
  }
};

struct LogisticOptions {
  double l2 = 1.0;
  int max_iters = 500;
  double tol = 1e-6;
  int history = 10;
};

/// L-BFGS from zero with a backtracking Armijo line search, so the objective
/// never increases between accepted iterates.
inline LinearModel fit_logistic(const Matrix& x, const Labels& y, const LogisticOptions& opt = {}) {
  detail::check_fit_input(x, y, "fit_logistic");
  if (!(opt.l2 > 0.0)) throw Error("classifiers", "fit_logistic: l2 must be positive");
  LinearModel m;
  m.kind = LinearKind::Logistic;
  m.strength = opt.l2;
  m.classes = detail::sorted_classes(y);
  if (m.classes.size() < 2) throw Error("classifiers", "fit_logistic: need at least 2 classes");
  const auto yi = detail::class_indices(y, m.classes);
  const auto k = static_cast<Eigen::Index>(m.classes.size());
  const Eigen::Index d = x.cols();
  const LogisticObjective f{x, yi, k, opt.l2};

  Matrix theta = Matrix::Zero(k, d + 1);
  Matrix grad;
  double value = f(theta, &grad);
  m.objective_history.push_back(value);
  std::deque<std::pair<Matrix, Matrix>> mem;  // (s, y) pairs
  int it = 0;
  for (; it < opt.max_iters && grad.cwiseAbs().maxCoeff() >= opt.tol; ++it) {
    // Two-loop recursion.
    Matrix q = grad;
    std::vector<double> alpha(mem.size());
    for (std::size_t j = mem.size(); j-- > 0;) {
      const auto& [s, yv] = mem[j];
      alpha[j] = s.cwiseProduct(q).sum() / yv.cwiseProduct(s).sum();
      q -= alpha[j] * yv;
    }
    if (!mem.empty()) {
      const auto& [s, yv] = mem.back();
      q *= s.cwiseProduct(yv).sum() / yv.squaredNorm();
    }
    for (std::size_t j = 0; j < mem.size(); ++j) {
      const auto& [s, yv] = mem[j];
      const double beta = yv.cwiseProduct(q).sum() / yv.cwiseProduct(s).sum();
      q += (alpha[j] - beta) * s;
    }
    Matrix dir = -q;
    double slope = grad.cwiseProduct(dir).sum();
    if (!(slope < 0.0)) {
      dir = -grad;
      slope = -grad.squaredNorm();
      mem.clear();
    }
    double step = mem.empty() ? std::min(1.0, 1.0 / std::sqrt(grad.squaredNorm())) : 1.0;
    Matrix next, next_grad;
    double next_value = value;
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls, step *= 0.5) {
      next = theta + step * dir;
      next_value = f(next, &next_grad);
      if (next_value <= value + 1e-4 * step * slope) {
        accepted = true;
        break;
      }
    }
    if (!accepted) break;
    Matrix s = next - theta;
    Matrix yv = next_grad - grad;
    if (s.cwiseProduct(yv).sum() > 1e-12) {
      mem.emplace_back(std::move(s), std::move(yv));
      if (static_cast<int>(mem.size()) > opt.history) mem.pop_front();
    }
    theta = std::move(next);
    grad = std::move(next_grad);
    value = next_value;
    m.objective_history.push_back(value);
  }
  m.iterations = it;
  m.gradient_inf_norm = grad.cwiseAbs().maxCoeff();
  m.converged = m.gradient_inf_norm < opt.tol;
  m.weights = theta.leftCols(d);
  m.bias = theta.col(d);
  return m;
}

/// One-vs-rest least squares on {-1, +1} targets with an unpenalized bias:
/// (Xb^T Xb + alpha * P) W = Xb^T T, where Xb = [X | 1] and P = diag(1..1, 0).
inline LinearModel fit_ridge(const Matrix& x, const Labels& y, double alpha = 1.0) {
  detail::check_fit_input(x, y, "fit_ridge");
  if (!(alpha > 0.0)) throw Error("classifiers", "fit_ridge: alpha must be positive");
  LinearModel m;
  m.kind = LinearKind::Ridge;
  m.strength = alpha;
  m.classes = detail::sorted_classes(y);
  if (m.classes.size() < 2) throw Error("classifiers", "fit_ridge: need at least 2 classes");
  const auto yi = detail::class_indices(y, m.classes);
  const Eigen::Index n = x.rows(), d = x.cols();
  const auto k = static_cast<Eigen::Index>(m.classes.size());

  Matrix gram(d + 1, d + 1);
  gram.topLeftCorner(d, d).noalias() = x.transpose() * x;
  const Vector colsum = x.colwise().sum().transpose();
  gram.topRightCorner(d, 1) = colsum;
  gram.bottomLeftCorner(1, d) = colsum.transpose();
  gram(d, d) = static_cast<double>(n);
  gram.topLeftCorner(d, d).diagonal().array() += alpha;

  Matrix targets = Matrix::Constant(n, k, -1.0);
  for (Eigen::Index i = 0; i < n; ++i) targets(i, yi[static_cast<std::size_t>(i)]) = 1.0;
  Matrix rhs(d + 1, k);
  rhs.topRows(d).noalias() = x.transpose() * targets;
  rhs.row(d) = targets.colwise().sum();

  Eigen::LDLT<Matrix> ldlt(gram);
  if (ldlt.info() != Eigen::Success) throw Error("classifiers", "fit_ridge: factorization failed");
  Matrix sol = ldlt.solve(rhs);  // (d+1) x k
  sol += ldlt.solve(rhs - gram * sol);  // one refinement step
  m.weights = sol.topRows(d).transpose();
  m.bias = sol.row(d).transpose();
  m.converged = true;
  return m;
}

}  // namespace latentaug
