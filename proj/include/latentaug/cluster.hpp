#pragma once

// Seeded Lloyd K-Means with k-means++ initialization, plus the nearest
// prototype queries shared with the dictionary.

#include "latentaug/common.hpp"
#include "latentaug/store.hpp"

#include <nlohmann/json.hpp>

#include <limits>

namespace latentaug {

struct KMeansOptions {
  int clusters = 16;
  std::uint64_t seed = 66;
  int max_iters = 100;
  double tol = 1e-4;
};

struct ClusterModel {
  Matrix prototypes;  // C x d
  std::vector<int> assignments;
  double inertia = 0.0;
  std::uint64_t seed = 0;
  int iterations_run = 0;
  double tol = 0.0;
  std::vector<double> inertia_history;  // one entry per Lloyd assignment step
  bool input_normalized = true;

  int clusters() const { return static_cast<int>(prototypes.rows()); }
  Eigen::Index dim() const { return prototypes.cols(); }
};

/// Euclidean nearest prototype; ties go to the lowest index.
inline int assign(const Matrix& prototypes, const Eigen::Ref<const Vector>& z) {
  if (z.size() != prototypes.cols())
    throw Error("cluster", "dimension mismatch: query has " + std::to_string(z.size()) +
                               ", prototypes have " + std::to_string(prototypes.cols()));
  return static_cast<int>(argmin_lowest((prototypes.rowwise() - z.transpose()).rowwise().squaredNorm()));
}

inline int assign(const ClusterModel& model, const Eigen::Ref<const Vector>& z) {
  return assign(model.prototypes, z);
}

/// argmax_i cos(z, c_i); ties go to the lowest index.
inline int nearest_prototype_cosine(const Matrix& prototypes, const Eigen::Ref<const Vector>& z) {
  if (z.size() != prototypes.cols()) throw Error("cluster", "dimension mismatch in cosine query");
  const double zn = z.norm();
  if (!(zn > 0.0)) throw Error("cluster", "zero-norm query");
  const Vector norms = prototypes.rowwise().norm();
  if (!(norms.minCoeff() > 0.0)) throw Error("cluster", "zero-norm prototype");
  const Vector cosine = (prototypes * z).cwiseQuotient(norms) / zn;
  return static_cast<int>(argmax_lowest(cosine));
}

namespace detail {

inline Matrix kmeanspp_init(const Matrix& x, int clusters, Rng& rng) {
  const Eigen::Index n = x.rows();
  Matrix centers(clusters, x.cols());
  std::uniform_int_distribution<Eigen::Index> first(0, n - 1);
  centers.row(0) = x.row(first(rng));
  Vector d2 = (x.rowwise() - centers.row(0)).rowwise().squaredNorm();
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (int k = 1; k < clusters; ++k) {
    const double total = d2.sum();
    Eigen::Index pick = n - 1;
    if (total > 0.0) {
      const double target = unif(rng) * total;
      double acc = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        acc += d2(i);
        if (acc > target) {
          pick = i;
          break;
        }
      }
    } else {
      pick = first(rng);
    }
    centers.row(k) = x.row(pick);
    d2 = d2.cwiseMin((x.rowwise() - centers.row(k)).rowwise().squaredNorm());
  }
  return centers;
}

}  // namespace detail

inline ClusterModel kmeans_fit(const EmbeddingDataset& ds, const KMeansOptions& opt,
                               unsigned threads = thread_count()) {
  const Eigen::Index n = ds.size();
  if (opt.clusters < 1) throw Error("cluster", "C must be at least 1");
  if (opt.clusters > n)
    throw Error("cluster", "C=" + std::to_string(opt.clusters) + " exceeds N=" + std::to_string(n));
  if (opt.max_iters < 1) throw Error("cluster", "max_iters must be at least 1");

  const Matrix x = ds.features.cast<double>();
  Rng rng(opt.seed);
  ClusterModel model;
  model.seed = opt.seed;
  model.tol = opt.tol;
  model.input_normalized = ds.normalized;
  model.prototypes = detail::kmeanspp_init(x, opt.clusters, rng);
  model.assignments.assign(static_cast<std::size_t>(n), 0);
  std::vector<double> dist2(static_cast<std::size_t>(n), 0.0);

  auto assign_all = [&] {
    parallel_for(static_cast<std::size_t>(n), [&](std::size_t i) {
      const auto r = static_cast<Eigen::Index>(i);
      const Vector d = (model.prototypes.rowwise() - x.row(r)).rowwise().squaredNorm();
      const auto k = argmin_lowest(d);
      model.assignments[i] = static_cast<int>(k);
      dist2[i] = d(k);
    }, threads);
    double total = 0.0;
    for (double v : dist2) total += v;
    return total;
  };

  for (int it = 0; it < opt.max_iters; ++it) {
    model.inertia = assign_all();
    model.inertia_history.push_back(model.inertia);
    model.iterations_run = it + 1;

    Matrix sums = Matrix::Zero(opt.clusters, x.cols());
    std::vector<Eigen::Index> counts(static_cast<std::size_t>(opt.clusters), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      const int k = model.assignments[static_cast<std::size_t>(i)];
      sums.row(k) += x.row(i);
      ++counts[static_cast<std::size_t>(k)];
    }
    Matrix next = model.prototypes;
    std::vector<bool> taken(static_cast<std::size_t>(n), false);
    for (int k = 0; k < opt.clusters; ++k) {
      if (counts[static_cast<std::size_t>(k)] > 0) {
        next.row(k) = sums.row(k) / static_cast<double>(counts[static_cast<std::size_t>(k)]);
        continue;
      }
      // Empty cluster: move it onto the point farthest from its own prototype.
      Eigen::Index far = -1;
      double best = -1.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        if (taken[static_cast<std::size_t>(i)]) continue;
        const double dd = dist2[static_cast<std::size_t>(i)];
        if (dd > best) best = dd, far = i;
      }
      taken[static_cast<std::size_t>(far)] = true;
      next.row(k) = x.row(far);
    }
    const double shift = (next - model.prototypes).rowwise().norm().maxCoeff();
    model.prototypes = std::move(next);
    if (shift < opt.tol) break;
  }
  model.inertia = assign_all();
  model.inertia_history.push_back(model.inertia);
  return model;
}

// ---------------------------------------------------------------------------
// Persistence: <stem>.emb holds prototypes (labels = cluster index),
// <stem>.json the sidecar with metadata and per-row assignments.

inline void save_cluster_model(const ClusterModel& m, const std::string& stem) {
  EmbeddingDataset protos;
  protos.features = m.prototypes.cast<float>();
  protos.labels.emplace();
  for (int k = 0; k < m.clusters(); ++k) protos.labels->push_back(static_cast<ClassId>(k));
  save_embeddings(protos, stem + ".emb");
  nlohmann::json j;
  j["C"] = m.clusters();
  j["seed"] = m.seed;
  j["inertia"] = m.inertia;
  j["iterations_run"] = m.iterations_run;
  j["tol"] = m.tol;
  j["inertia_history"] = m.inertia_history;
  j["assignments"] = m.assignments;
  std::ofstream out(stem + ".json");
  if (!out) throw Error("cluster", "cannot write " + stem + ".json");
  out << j.dump(2) << '\n';
}

inline ClusterModel load_cluster_model(const std::string& stem) {
  const auto protos = load_embeddings(stem + ".emb");
  std::ifstream in(stem + ".json");
  if (!in) throw Error("cluster", "cannot open " + stem + ".json");
  const auto j = nlohmann::json::parse(in);
  ClusterModel m;
  m.prototypes = protos.features.cast<double>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.inertia = j.at("inertia").get<double>();
  m.iterations_run = j.at("iterations_run").get<int>();
  m.tol = j.at("tol").get<double>();
  m.inertia_history = j.value("inertia_history", std::vector<double>{});
  m.assignments = j.at("assignments").get<std::vector<int>>();
  if (j.at("C").get<int>() != m.clusters()) throw Error("cluster", "sidecar C does not match prototypes");
  return m;
}

}  // namespace latentaug
