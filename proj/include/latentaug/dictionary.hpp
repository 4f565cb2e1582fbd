#pragma once

// Base dictionary of (prototype, covariance) pairs and the samplers built on
// it: latent augmentation and Distribution Calibration.

#include "latentaug/cluster.hpp"
#include "latentaug/common.hpp"
#include "latentaug/store.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <optional>

namespace latentaug {

enum class CovarianceType { Full, Tied, Diag, Spherical, None };

inline std::string to_string(CovarianceType t) {
  switch (t) {
    case CovarianceType::Full: return "full";
    case CovarianceType::Tied: return "tied";
    case CovarianceType::Diag: return "diag";
    case CovarianceType::Spherical: return "spherical";
    case CovarianceType::None: return "none";
  }
  return "?";
}

inline CovarianceType parse_covariance_type(const std::string& s) {
  if (s == "full") return CovarianceType::Full;
  if (s == "tied") return CovarianceType::Tied;
  if (s == "diag") return CovarianceType::Diag;
  if (s == "spherical") return CovarianceType::Spherical;
  if (s == "none") return CovarianceType::None;
  throw Error("dictionary", "unknown covariance type '" + s + "'");
}

enum class DictionarySource { Unsupervised, Supervised };

/// Zero-mean Gaussian sampler. The factor shape depends on the covariance type:
/// Full/Tied keep a lower-triangular d x d Cholesky factor of (cov + eps*I),
/// Diag a d-vector of standard deviations, Spherical a single one, None nothing.
struct GaussianFactor {
  CovarianceType type = CovarianceType::None;
  Matrix lower;   // Full/Tied
  Vector stddev;  // Diag (size d) or Spherical (size 1)

  Vector sample(Eigen::Index d, Rng& rng) const {
    switch (type) {
      case CovarianceType::Full:
      case CovarianceType::Tied:
        return lower.triangularView<Eigen::Lower>() * standard_normal(d, rng);
      case CovarianceType::Diag:
        return stddev.cwiseProduct(standard_normal(d, rng));
      case CovarianceType::Spherical:
        return stddev(0) * standard_normal(d, rng);
      case CovarianceType::None:
        break;
    }
    return Vector::Zero(d);
  }
};

inline Matrix cholesky_lower(const Matrix& cov, double ridge_eps) {
  Matrix a = cov;
  a.diagonal().array() += ridge_eps;
  Eigen::LLT<Matrix> llt(a);
  if (llt.info() != Eigen::Success)
    throw Error("dictionary", "Cholesky failed; ridge_eps " + std::to_string(ridge_eps) +
                                  " is too small for this covariance");
  return llt.matrixL();
}

struct DictionaryEntry {
  Vector prototype;
  // Full/Tied: d x d. Diag: d x 1 variances. Spherical: 1 x 1. None: empty.
  Matrix covariance;
  GaussianFactor factor;
  std::size_t count = 0;

  /// Covariance as a dense d x d matrix, without the ridge term.
  Matrix dense_covariance(CovarianceType type) const {
    const auto d = prototype.size();
    switch (type) {
      case CovarianceType::Full:
      case CovarianceType::Tied: return covariance;
      case CovarianceType::Diag: return covariance.col(0).asDiagonal();
      case CovarianceType::Spherical: return covariance(0, 0) * Matrix::Identity(d, d);
      case CovarianceType::None: break;
    }
    return Matrix::Zero(d, d);
  }
};

struct BaseDictionary {
  std::vector<DictionaryEntry> entries;
  CovarianceType covariance_type = CovarianceType::Full;
  double ridge_eps = 1e-6;
  Eigen::Index dim = 0;
  DictionarySource source = DictionarySource::Unsupervised;
  std::vector<ClassId> entry_classes;  // supervised only

  int size() const { return static_cast<int>(entries.size()); }

  Matrix prototypes() const {
    Matrix p(static_cast<Eigen::Index>(entries.size()), dim);
    for (std::size_t i = 0; i < entries.size(); ++i) p.row(static_cast<Eigen::Index>(i)) = entries[i].prototype.transpose();
    return p;
  }
};

namespace detail {

/// Population covariance (divide by n) of the given rows around their mean.
inline Matrix population_covariance(const Matrix& rows, const Vector& mean) {
  const Matrix centered = rows.rowwise() - mean.transpose();
  Matrix cov = (centered.transpose() * centered) / static_cast<double>(rows.rows());
  return 0.5 * (cov + cov.transpose());
}

inline Matrix gather(const Matrix& x, const std::vector<Eigen::Index>& idx) {
  Matrix out(static_cast<Eigen::Index>(idx.size()), x.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = x.row(idx[r]);
  return out;
}

inline DictionaryEntry make_entry(const Matrix& rows, CovarianceType type, double ridge_eps,
                                  const Matrix* tied) {
  DictionaryEntry e;
  e.count = static_cast<std::size_t>(rows.rows());
  e.prototype = rows.colwise().mean().transpose();
  e.factor.type = type;
  switch (type) {
    case CovarianceType::Full:
      e.covariance = population_covariance(rows, e.prototype);
      e.factor.lower = cholesky_lower(e.covariance, ridge_eps);
      break;
    case CovarianceType::Tied:
      e.covariance = *tied;
      break;
    case CovarianceType::Diag: {
      const Matrix centered = rows.rowwise() - e.prototype.transpose();
      e.covariance = centered.array().square().colwise().mean().transpose().matrix();
      e.factor.stddev = e.covariance.col(0).cwiseSqrt();
      break;
    }
    case CovarianceType::Spherical: {
      const Matrix centered = rows.rowwise() - e.prototype.transpose();
      const double v = centered.array().square().colwise().mean().mean();
      e.covariance = Matrix::Constant(1, 1, v);
      e.factor.stddev = Vector::Constant(1, std::sqrt(v));
      break;
    }
    case CovarianceType::None:
      break;
  }
  return e;
}

inline BaseDictionary build_from_groups(const Matrix& x, const std::vector<std::vector<Eigen::Index>>& groups,
                                        CovarianceType type, double ridge_eps) {
  if (ridge_eps < 0.0) throw Error("dictionary", "ridge_eps must be non-negative");
  BaseDictionary dict;
  dict.covariance_type = type;
  dict.ridge_eps = ridge_eps;
  dict.dim = x.cols();
  Matrix tied;
  Matrix tied_lower;
  if (type == CovarianceType::Tied) {
    tied = population_covariance(x, x.colwise().mean().transpose());
    tied_lower = cholesky_lower(tied, ridge_eps);
  }
  for (std::size_t k = 0; k < groups.size(); ++k) {
    if (groups[k].empty()) throw Error("dictionary", "empty cluster " + std::to_string(k));
    auto e = make_entry(gather(x, groups[k]), type, ridge_eps, &tied);
    if (type == CovarianceType::Tied) e.factor.lower = tied_lower;
    dict.entries.push_back(std::move(e));
  }
  return dict;
}

}  // namespace detail

inline BaseDictionary build_dictionary(const EmbeddingDataset& ds, const std::vector<int>& assignments,
                                       int clusters, CovarianceType type, double ridge_eps = 1e-6) {
  if (clusters < 1) throw Error("dictionary", "C must be at least 1");
  if (assignments.size() != static_cast<std::size_t>(ds.size()))
    throw Error("dictionary", "assignments length does not match N");
  std::vector<std::vector<Eigen::Index>> groups(static_cast<std::size_t>(clusters));
  for (std::size_t i = 0; i < assignments.size(); ++i) {
    const int k = assignments[i];
    if (k < 0 || k >= clusters) throw Error("dictionary", "assignment out of range at row " + std::to_string(i));
    groups[static_cast<std::size_t>(k)].push_back(static_cast<Eigen::Index>(i));
  }
  return detail::build_from_groups(ds.features.cast<double>(), groups, type, ridge_eps);
}

/// One entry per class (ascending class id).
inline BaseDictionary build_supervised_dictionary(const EmbeddingDataset& ds, CovarianceType type,
                                                  double ridge_eps = 1e-6) {
  if (!ds.labels) throw Error("dictionary", "supervised dictionary needs labels");
  std::map<ClassId, std::vector<Eigen::Index>> by_class;
  for (std::size_t i = 0; i < ds.labels->size(); ++i)
    by_class[(*ds.labels)[i]].push_back(static_cast<Eigen::Index>(i));
  std::vector<std::vector<Eigen::Index>> groups;
  std::vector<ClassId> ids;
  for (auto& [c, members] : by_class) {
    if (type != CovarianceType::None && members.size() < 2)
      throw Error("dictionary", "degenerate class " + std::to_string(c) + " (fewer than 2 samples)");
    ids.push_back(c);
    groups.push_back(std::move(members));
  }
  auto dict = detail::build_from_groups(ds.features.cast<double>(), groups, type, ridge_eps);
  dict.source = DictionarySource::Supervised;
  dict.entry_classes = std::move(ids);
  return dict;
}

// ---------------------------------------------------------------------------
// Latent augmentation

struct AugmentOptions {
  int count = 100;  // outputs per input, original included
  bool renormalize = false;
};

/// Returns count rows: the original z first, then z + delta with delta drawn
/// from the covariance of the most cosine-similar prototype.
inline Matrix augment(const BaseDictionary& dict, const Eigen::Ref<const Vector>& z,
                      const AugmentOptions& opt, std::uint64_t rng_seed) {
  if (opt.count < 1) throw Error("dictionary", "augmentation count must be at least 1");
  if (z.size() != dict.dim) throw Error("dictionary", "dimension mismatch in augment");
  const Matrix protos = dict.prototypes();
  const int best = nearest_prototype_cosine(protos, z);
  const auto& factor = dict.entries[static_cast<std::size_t>(best)].factor;
  Rng rng(rng_seed);
  Matrix out(opt.count, z.size());
  out.row(0) = z.transpose();
  for (int t = 1; t < opt.count; ++t) {
    Vector v = z + factor.sample(z.size(), rng);
    if (opt.renormalize) {
      const double n = v.norm();
      if (n > 0.0) v /= n;
    }
    out.row(t) = v.transpose();
  }
  return out;
}

inline Matrix augment(const BaseDictionary& dict, const Eigen::Ref<const Vector>& z, int count,
                      std::uint64_t rng_seed) {
  return augment(dict, z, AugmentOptions{count, false}, rng_seed);
}

// ---------------------------------------------------------------------------
// Distribution Calibration

struct ClassStats {
  std::vector<ClassId> classes;
  std::vector<Vector> means;
  std::vector<Matrix> covariances;

  Eigen::Index dim() const { return means.empty() ? 0 : means.front().size(); }
};

inline ClassStats compute_class_stats(const EmbeddingDataset& ds) {
  const auto dict = build_supervised_dictionary(ds, CovarianceType::Full, 0.0);
  ClassStats s;
  s.classes = dict.entry_classes;
  for (const auto& e : dict.entries) {
    s.means.push_back(e.prototype);
    s.covariances.push_back(e.covariance);
  }
  return s;
}

struct CalibratedGaussian {
  Vector mean;
  Matrix covariance;
  std::vector<std::size_t> selected;  // indices into ClassStats
};

/// mean' = (sum of the k nearest class means + z) / (k + 1);
/// cov'  = (sum of their covariances) / k + alpha (added entrywise).
/// Nearness is cosine similarity between z and the class means.
inline CalibratedGaussian distribution_calibration(const ClassStats& stats, const Eigen::Ref<const Vector>& z,
                                                   int k, double alpha) {
  if (k < 1) throw Error("dictionary", "k must be at least 1");
  if (static_cast<std::size_t>(k) > stats.means.size())
    throw Error("dictionary", "k=" + std::to_string(k) + " exceeds class count " +
                                  std::to_string(stats.means.size()));
  if (z.size() != stats.dim()) throw Error("dictionary", "dimension mismatch in calibration");
  const double zn = z.norm();
  if (!(zn > 0.0)) throw Error("dictionary", "zero-norm query");
  std::vector<std::pair<double, std::size_t>> sims;
  for (std::size_t i = 0; i < stats.means.size(); ++i)
    sims.emplace_back(stats.means[i].dot(z) / (stats.means[i].norm() * zn), i);
  std::stable_sort(sims.begin(), sims.end(), [](auto& a, auto& b) { return a.first > b.first; });

  CalibratedGaussian out;
  out.mean = z;
  out.covariance = Matrix::Zero(z.size(), z.size());
  for (int j = 0; j < k; ++j) {
    const auto i = sims[static_cast<std::size_t>(j)].second;
    out.selected.push_back(i);
    out.mean += stats.means[i];
    out.covariance += stats.covariances[i];
  }
  out.mean /= static_cast<double>(k + 1);
  out.covariance /= static_cast<double>(k);
  out.covariance.array() += alpha;
  return out;
}

struct CalibrationOptions {
  int k = 1;
  double alpha = 0.0;
  int count = 100;  // outputs per input, original included
  double ridge_eps = 1e-6;
};

/// z followed by count - 1 draws from the calibrated Gaussian.
inline Matrix calibrate_and_sample(const ClassStats& stats, const Eigen::Ref<const Vector>& z,
                                   const CalibrationOptions& opt, std::uint64_t rng_seed) {
  if (opt.count < 1) throw Error("dictionary", "augmentation count must be at least 1");
  const auto g = distribution_calibration(stats, z, opt.k, opt.alpha);
  GaussianFactor f;
  f.type = CovarianceType::Full;
  f.lower = cholesky_lower(g.covariance, opt.ridge_eps);
  Rng rng(rng_seed);
  Matrix out(opt.count, z.size());
  out.row(0) = z.transpose();
  for (int t = 1; t < opt.count; ++t) out.row(t) = (g.mean + f.sample(z.size(), rng)).transpose();
  return out;
}

// ---------------------------------------------------------------------------
// Diagnostics

/// Pearson correlation between the lower triangles (diagonal included).
inline double covariance_pearson(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols() || a.rows() != a.cols())
    throw Error("dictionary", "covariance_pearson needs two square matrices of equal shape");
  const Eigen::Index d = a.rows();
  const Eigen::Index m = d * (d + 1) / 2;
  Vector x(m), y(m);
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index j = 0; j <= i; ++j, ++k) x(k) = a(i, j), y(k) = b(i, j);
  x.array() -= x.mean();
  y.array() -= y.mean();
  const double sx = x.norm(), sy = y.norm();
  if (!(sx > 0.0) || !(sy > 0.0)) throw Error("dictionary", "zero variance in covariance_pearson");
  return std::clamp(x.dot(y) / (sx * sy), -1.0, 1.0);
}

inline Matrix dataset_covariance(const EmbeddingDataset& ds) {
  const Matrix x = ds.features.cast<double>();
  return detail::population_covariance(x, x.colwise().mean().transpose());
}

// ---------------------------------------------------------------------------
// Persistence: <stem>.json manifest, <stem>.protos.emb (C x d), and
// <stem>.cov.emb with covariance blocks stacked row-major as float32
// (Full/Tied: C*d rows of d; Diag: C rows of d; Spherical: C rows of 1).

inline void save_dictionary(const BaseDictionary& dict, const std::string& stem) {
  EmbeddingDataset protos;
  protos.features = dict.prototypes().cast<float>();
  save_embeddings(protos, stem + ".protos.emb");
  if (dict.covariance_type != CovarianceType::None) {
    EmbeddingDataset cov;
    const Eigen::Index d = dict.dim;
    const auto c = static_cast<Eigen::Index>(dict.entries.size());
    switch (dict.covariance_type) {
      case CovarianceType::Full:
      case CovarianceType::Tied:
        cov.features.resize(c * d, d);
        for (Eigen::Index i = 0; i < c; ++i)
          cov.features.block(i * d, 0, d, d) = dict.entries[static_cast<std::size_t>(i)].covariance.cast<float>();
        break;
      case CovarianceType::Diag:
        cov.features.resize(c, d);
        for (Eigen::Index i = 0; i < c; ++i)
          cov.features.row(i) = dict.entries[static_cast<std::size_t>(i)].covariance.col(0).cast<float>().transpose();
        break;
      default:
        cov.features.resize(c, 1);
        for (Eigen::Index i = 0; i < c; ++i)
          cov.features(i, 0) = static_cast<float>(dict.entries[static_cast<std::size_t>(i)].covariance(0, 0));
    }
    save_embeddings(cov, stem + ".cov.emb");
  }
  nlohmann::json j;
  j["C"] = dict.size();
  j["dim"] = dict.dim;
  j["cov_type"] = to_string(dict.covariance_type);
  j["ridge_eps"] = dict.ridge_eps;
  j["source"] = dict.source == DictionarySource::Supervised ? "supervised" : "unsupervised";
  std::vector<std::size_t> counts;
  for (const auto& e : dict.entries) counts.push_back(e.count);
  j["counts"] = counts;
  if (!dict.entry_classes.empty()) j["classes"] = dict.entry_classes;
  std::ofstream out(stem + ".json");
  if (!out) throw Error("dictionary", "cannot write " + stem + ".json");
  out << j.dump(2) << '\n';
}

inline BaseDictionary load_dictionary(const std::string& stem) {
  std::ifstream in(stem + ".json");
  if (!in) throw Error("dictionary", "cannot open " + stem + ".json");
  const auto j = nlohmann::json::parse(in);
  BaseDictionary dict;
  dict.covariance_type = parse_covariance_type(j.at("cov_type").get<std::string>());
  dict.ridge_eps = j.at("ridge_eps").get<double>();
  dict.dim = j.at("dim").get<Eigen::Index>();
  dict.source = j.at("source").get<std::string>() == "supervised" ? DictionarySource::Supervised
                                                                   : DictionarySource::Unsupervised;
  if (j.contains("classes")) dict.entry_classes = j["classes"].get<std::vector<ClassId>>();
  const auto counts = j.value("counts", std::vector<std::size_t>{});
  const auto protos = load_embeddings(stem + ".protos.emb");
  const Eigen::Index c = protos.size();
  const Eigen::Index d = dict.dim;
  if (c != j.at("C").get<Eigen::Index>() || protos.dim() != d)
    throw Error("dictionary", "prototype payload does not match manifest");
  std::optional<EmbeddingDataset> cov;
  if (dict.covariance_type != CovarianceType::None) cov = load_embeddings(stem + ".cov.emb");
  Matrix tied_lower;
  for (Eigen::Index i = 0; i < c; ++i) {
    DictionaryEntry e;
    e.prototype = protos.row(i);
    e.count = i < static_cast<Eigen::Index>(counts.size()) ? counts[static_cast<std::size_t>(i)] : 0;
    e.factor.type = dict.covariance_type;
    switch (dict.covariance_type) {
      case CovarianceType::Full:
      case CovarianceType::Tied:
        if (cov->size() != c * d || cov->dim() != d) throw Error("dictionary", "covariance payload shape mismatch");
        e.covariance = cov->features.block(i * d, 0, d, d).cast<double>();
        e.covariance = 0.5 * (e.covariance + e.covariance.transpose()).eval();
        if (dict.covariance_type == CovarianceType::Full || i == 0)
          tied_lower = cholesky_lower(e.covariance, dict.ridge_eps);
        e.factor.lower = tied_lower;
        break;
      case CovarianceType::Diag:
        if (cov->size() != c || cov->dim() != d) throw Error("dictionary", "covariance payload shape mismatch");
        e.covariance = cov->row(i);
        e.factor.stddev = e.covariance.col(0).cwiseSqrt();
        break;
      case CovarianceType::Spherical:
        if (cov->size() != c || cov->dim() != 1) throw Error("dictionary", "covariance payload shape mismatch");
        e.covariance = Matrix::Constant(1, 1, cov->features(i, 0));
        e.factor.stddev = Vector::Constant(1, std::sqrt(e.covariance(0, 0)));
        break;
      case CovarianceType::None:
        break;
    }
    dict.entries.push_back(std::move(e));
  }
  return dict;
}

}  // namespace latentaug
