#pragma once

// Embedding datasets: the EMB1 binary container, CSV, normalization,
// class-based splits, and the synthetic Gaussian-mixture generator.

#include "latentaug/common.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>

namespace latentaug {

struct EmbeddingDataset {
  FeatureMatrix features;
  std::optional<Labels> labels;
  std::optional<std::vector<std::uint32_t>> wsi_ids;
  std::map<ClassId, std::string> class_names;
  bool normalized = false;

  Eigen::Index size() const { return features.rows(); }
  Eigen::Index dim() const { return features.cols(); }
  bool has_labels() const { return labels.has_value(); }
  bool has_wsi() const { return wsi_ids.has_value(); }

  Vector row(Eigen::Index i) const { return features.row(i).cast<double>().transpose(); }

  /// Sorted distinct labels.
  std::vector<ClassId> classes() const {
    if (!labels) return {};
    std::set<ClassId> s(labels->begin(), labels->end());
    return {s.begin(), s.end()};
  }

  /// Throws if any invariant is broken.
  void validate() const {
    if (features.rows() < 1 || features.cols() < 1)
      throw Error("store", "dataset must have N >= 1 and d >= 1");
    for (Eigen::Index i = 0; i < features.rows(); ++i) {
      if (!features.row(i).allFinite())
        throw Error("store", "non-finite value in row " + std::to_string(i));
      if (normalized) {
        const double n = features.row(i).cast<double>().norm();
        if (std::abs(n - 1.0) > 1e-5)
          throw Error("store", "row " + std::to_string(i) + " flagged normalized but has norm " +
                                   std::to_string(n));
      }
    }
    if (labels && labels->size() != static_cast<std::size_t>(features.rows()))
      throw Error("store", "labels length does not match N");
    if (wsi_ids && wsi_ids->size() != static_cast<std::size_t>(features.rows()))
      throw Error("store", "wsi_ids length does not match N");
  }
};

inline bool operator==(const EmbeddingDataset& a, const EmbeddingDataset& b) {
  return a.features.rows() == b.features.rows() && a.features.cols() == b.features.cols() &&
         std::memcmp(a.features.data(), b.features.data(),
                     sizeof(float) * static_cast<std::size_t>(a.features.size())) == 0 &&
         a.labels == b.labels && a.wsi_ids == b.wsi_ids && a.normalized == b.normalized;
}

// ---------------------------------------------------------------------------
// EMB1 container

enum class FileFormat { Binary, Csv };

namespace detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
void write_le(std::ostream& out, T value) {
  static_assert(sizeof(T) == 4);
  std::uint32_t bits;
  std::memcpy(&bits, &value, 4);
  unsigned char b[4] = {static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
                        static_cast<unsigned char>(bits >> 16),
                        static_cast<unsigned char>(bits >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

template <typename T>
T read_le(const unsigned char* p) {
  static_assert(sizeof(T) == 4);
  const std::uint32_t bits = std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) |
                             (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
  T value;
  std::memcpy(&value, &bits, 4);
  return value;
}

inline constexpr unsigned char kFlagLabels = 1u << 0;
inline constexpr unsigned char kFlagWsi = 1u << 1;
inline constexpr unsigned char kFlagNormalized = 1u << 2;

inline std::vector<unsigned char> read_all(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("store", "cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline EmbeddingDataset load_binary(const std::string& path) {
  const auto bytes = read_all(path);
  if (bytes.size() < 13) throw Error("store", "truncated header in " + path);
  if (std::memcmp(bytes.data(), "EMB1", 4) != 0) throw Error("store", "bad magic in " + path);
  const unsigned char flags = bytes[4];
  if (flags & ~(kFlagLabels | kFlagWsi | kFlagNormalized))
    throw Error("store", "unknown flag bits in " + path);
  const std::uint64_t n = read_le<std::uint32_t>(&bytes[5]);
  const std::uint64_t d = read_le<std::uint32_t>(&bytes[9]);
  if (n == 0 || d == 0) throw Error("store", "header declares an empty dataset");
  std::uint64_t expected = 13 + 4 * n * d;
  if (flags & kFlagLabels) expected += 4 * n;
  if (flags & kFlagWsi) expected += 4 * n;
  if (bytes.size() != expected)
    throw Error("store", "payload size " + std::to_string(bytes.size()) +
                             " does not match declared N=" + std::to_string(n) +
                             " d=" + std::to_string(d) + " (expected " + std::to_string(expected) +
                             ")");
  EmbeddingDataset ds;
  ds.features.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  const unsigned char* p = &bytes[13];
  for (std::uint64_t i = 0; i < n * d; ++i, p += 4) ds.features.data()[i] = read_le<float>(p);
  if (flags & kFlagLabels) {
    ds.labels.emplace(n);
    for (auto& l : *ds.labels) l = read_le<std::uint32_t>(p), p += 4;
  }
  if (flags & kFlagWsi) {
    ds.wsi_ids.emplace(n);
    for (auto& w : *ds.wsi_ids) w = read_le<std::uint32_t>(p), p += 4;
  }
  ds.normalized = (flags & kFlagNormalized) != 0;
  ds.validate();
  return ds;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    out.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline EmbeddingDataset load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("store", "cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw Error("store", "empty csv " + path);
  const auto header = split_csv_line(line);
  std::size_t d = 0;
  while (d < header.size() && header[d] == "f" + std::to_string(d)) ++d;
  bool has_label = false, has_wsi = false;
  std::size_t col = d;
  if (col < header.size() && header[col] == "label") has_label = true, ++col;
  if (col < header.size() && header[col] == "wsi") has_wsi = true, ++col;
  if (d == 0 || col != header.size()) throw Error("store", "malformed csv header in " + path);

  std::vector<float> values;
  Labels labels;
  std::vector<std::uint32_t> wsis;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size())
      throw Error("store", "csv row " + std::to_string(row) + " has " +
                               std::to_string(cells.size()) + " columns, expected " +
                               std::to_string(header.size()));
    for (std::size_t j = 0; j < d; ++j) {
      char* end = nullptr;
      const float v = std::strtof(cells[j].c_str(), &end);
      if (end == cells[j].c_str() || *end != '\0')
        throw Error("store", "bad number '" + cells[j] + "' in csv row " + std::to_string(row));
      values.push_back(v);
    }
    auto parse_u32 = [&](const std::string& s) {
      char* end = nullptr;
      const long long v = std::strtoll(s.c_str(), &end, 10);
      if (end == s.c_str() || *end != '\0' || v < 0 || v > 0xffffffffLL)
        throw Error("store", "bad id '" + s + "' in csv row " + std::to_string(row));
      return static_cast<std::uint32_t>(v);
    };
    if (has_label) labels.push_back(parse_u32(cells[d]));
    if (has_wsi) wsis.push_back(parse_u32(cells[d + (has_label ? 1 : 0)]));
    ++row;
  }
  if (row == 0) throw Error("store", "csv has no rows: " + path);
  EmbeddingDataset ds;
  ds.features = Eigen::Map<FeatureMatrix>(values.data(), static_cast<Eigen::Index>(row),
                                          static_cast<Eigen::Index>(d));
  if (has_label) ds.labels = std::move(labels);
  if (has_wsi) ds.wsi_ids = std::move(wsis);
  ds.validate();
  return ds;
}

}  // namespace detail

inline EmbeddingDataset load_embeddings(const std::string& path,
                                        FileFormat format = FileFormat::Binary) {
  return format == FileFormat::Binary ? detail::load_binary(path) : detail::load_csv(path);
}

/// Picks the format from the extension: ".csv" is CSV, anything else EMB1.
inline EmbeddingDataset load_embeddings_auto(const std::string& path) {
  const bool csv = path.size() >= 4 && path.compare(path.size() - 4, 4, ".csv") == 0;
  return load_embeddings(path, csv ? FileFormat::Csv : FileFormat::Binary);
}

inline void save_embeddings(const EmbeddingDataset& ds, const std::string& path) {
  ds.validate();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("store", "cannot write " + path);
  unsigned char flags = 0;
  if (ds.labels) flags |= detail::kFlagLabels;
  if (ds.wsi_ids) flags |= detail::kFlagWsi;
  if (ds.normalized) flags |= detail::kFlagNormalized;
  out.write("EMB1", 4);
  out.put(static_cast<char>(flags));
  detail::write_le(out, static_cast<std::uint32_t>(ds.size()));
  detail::write_le(out, static_cast<std::uint32_t>(ds.dim()));
  for (Eigen::Index i = 0; i < ds.features.size(); ++i) detail::write_le(out, ds.features.data()[i]);
  if (ds.labels)
    for (auto l : *ds.labels) detail::write_le(out, l);
  if (ds.wsi_ids)
    for (auto w : *ds.wsi_ids) detail::write_le(out, w);
  if (!out) throw Error("store", "write failed for " + path);
}

inline void save_embeddings_csv(const EmbeddingDataset& ds, const std::string& path) {
  ds.validate();
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("store", "cannot write " + path);
  for (Eigen::Index j = 0; j < ds.dim(); ++j) out << (j ? "," : "") << 'f' << j;
  if (ds.labels) out << ",label";
  if (ds.wsi_ids) out << ",wsi";
  out << '\n';
  char buf[32];
  for (Eigen::Index i = 0; i < ds.size(); ++i) {
    for (Eigen::Index j = 0; j < ds.dim(); ++j) {
      std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(ds.features(i, j)));
      out << (j ? "," : "") << buf;
    }
    if (ds.labels) out << ',' << (*ds.labels)[static_cast<std::size_t>(i)];
    if (ds.wsi_ids) out << ',' << (*ds.wsi_ids)[static_cast<std::size_t>(i)];
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Transforms

inline EmbeddingDataset l2_normalize(const EmbeddingDataset& ds) {
  EmbeddingDataset out = ds;
  for (Eigen::Index i = 0; i < ds.size(); ++i) {
    const Vector r = ds.row(i);
    const double n = r.norm();
    if (!(n > 0.0)) throw Error("store", "zero-norm row " + std::to_string(i));
    out.features.row(i) = (r / n).cast<float>().transpose();
  }
  out.normalized = true;
  return out;
}

inline EmbeddingDataset subset(const EmbeddingDataset& ds, const std::vector<std::size_t>& idx) {
  if (idx.empty()) throw Error("store", "empty subset");
  EmbeddingDataset out;
  out.features.resize(static_cast<Eigen::Index>(idx.size()), ds.dim());
  for (std::size_t r = 0; r < idx.size(); ++r)
    out.features.row(static_cast<Eigen::Index>(r)) = ds.features.row(static_cast<Eigen::Index>(idx[r]));
  if (ds.labels) {
    out.labels.emplace();
    for (auto i : idx) out.labels->push_back((*ds.labels)[i]);
  }
  if (ds.wsi_ids) {
    out.wsi_ids.emplace();
    for (auto i : idx) out.wsi_ids->push_back((*ds.wsi_ids)[i]);
  }
  out.class_names = ds.class_names;
  out.normalized = ds.normalized;
  return out;
}

/// Stacks b under a. Optional columns survive only when both sides have them.
inline EmbeddingDataset concat(const EmbeddingDataset& a, const EmbeddingDataset& b) {
  if (a.dim() != b.dim()) throw Error("store", "concat dimension mismatch");
  EmbeddingDataset out;
  out.features.resize(a.size() + b.size(), a.dim());
  out.features << a.features, b.features;
  if (a.labels && b.labels) {
    out.labels = *a.labels;
    out.labels->insert(out.labels->end(), b.labels->begin(), b.labels->end());
  }
  if (a.wsi_ids && b.wsi_ids) {
    out.wsi_ids = *a.wsi_ids;
    out.wsi_ids->insert(out.wsi_ids->end(), b.wsi_ids->begin(), b.wsi_ids->end());
  }
  out.class_names = a.class_names;
  out.class_names.insert(b.class_names.begin(), b.class_names.end());
  out.normalized = a.normalized && b.normalized;
  return out;
}

struct ClassSplit {
  EmbeddingDataset base;
  EmbeddingDataset joint;
};

inline ClassSplit leave_one_class_out(const EmbeddingDataset& ds, ClassId novel_class) {
  if (!ds.labels) throw Error("store", "leave_one_class_out needs labels");
  std::vector<std::size_t> keep;
  bool seen = false;
  for (std::size_t i = 0; i < ds.labels->size(); ++i) {
    if ((*ds.labels)[i] == novel_class)
      seen = true;
    else
      keep.push_back(i);
  }
  if (!seen) throw Error("store", "unknown class " + std::to_string(novel_class));
  if (keep.empty()) throw Error("store", "empty base");
  return {subset(ds, keep), ds};
}

/// Per-class split: within each class, a seeded shuffle puts round(fraction*n)
/// samples into the first part and the rest into the second.
inline std::pair<EmbeddingDataset, EmbeddingDataset> split_per_class(const EmbeddingDataset& ds,
                                                                     double fraction,
                                                                     std::uint64_t seed) {
  if (!ds.labels) throw Error("store", "split_per_class needs labels");
  if (!(fraction > 0.0 && fraction < 1.0)) throw Error("store", "split fraction must be in (0,1)");
  std::map<ClassId, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < ds.labels->size(); ++i) by_class[(*ds.labels)[i]].push_back(i);
  Rng rng(seed);
  std::vector<std::size_t> first, second;
  for (auto& [c, members] : by_class) {
    std::shuffle(members.begin(), members.end(), rng);
    auto cut = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(members.size())));
    cut = std::clamp<std::size_t>(cut, 1, members.size() > 1 ? members.size() - 1 : 1);
    first.insert(first.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(cut));
    second.insert(second.end(), members.begin() + static_cast<std::ptrdiff_t>(cut), members.end());
  }
  std::sort(first.begin(), first.end());
  std::sort(second.begin(), second.end());
  return {subset(ds, first), subset(ds, second)};
}

// ---------------------------------------------------------------------------
// Synthetic embeddings

struct SyntheticSpec {
  int dim = 32;
  int base_classes = 7;
  int novel_classes = 2;
  int clusters_per_class = 2;
  int samples_per_class = 400;
  double mean_scale = 1.0;
  double covariance_scale = 0.9;
  bool shared_variation = true;
  int wsi_count = 0;
  std::uint64_t seed = 1;
  // Shape of the variation family. Cluster covariances are low rank plus a
  // small isotropic floor, drawn around a shared set of variation directions.
  int variation_rank = 0;  // 0: dim / 4
  double direction_jitter = 0.25;
  double isotropic_floor = 0.05;
  double cluster_spread = 0.5;  // cluster offsets within a class, relative to mean_scale
  double mean_offset = 0.0;     // common shift added to every class mean
  double wsi_style = 0.5;       // per-WSI offset scale, relative to covariance_scale

  void validate() const {
    if (dim < 1 || base_classes < 1 || novel_classes < 1 || clusters_per_class < 1 ||
        samples_per_class < 1)
      throw Error("store", "synthetic counts must be positive");
    if (!(mean_scale > 0.0)) throw Error("store", "mean_scale must be positive");
    if (!(covariance_scale >= 0.0)) throw Error("store", "covariance_scale must be >= 0");
    if (wsi_count < 0) throw Error("store", "wsi_count must be >= 0");
    if (variation_rank < 0 || variation_rank > dim) throw Error("store", "bad variation_rank");
  }
};

/// Generator ground truth, one record per cluster.
struct SyntheticTruth {
  std::vector<Vector> cluster_means;
  std::vector<Matrix> cluster_covariances;
  std::vector<ClassId> cluster_class;
  std::vector<int> covariance_source;  // novel clusters: copied base cluster index, else -1
};

struct SyntheticData {
  EmbeddingDataset base;
  EmbeddingDataset novel;
  SyntheticTruth truth;
};

namespace detail {

inline Matrix orthonormal_columns(const Matrix& m) {
  Eigen::HouseholderQR<Matrix> qr(m);
  return qr.householderQ() * Matrix::Identity(m.rows(), m.cols());
}

}  // namespace detail

/// Gaussian-mixture embeddings. Base classes take labels [0, base_classes),
/// novel classes follow. With shared_variation, each novel cluster reuses the
/// covariance of a randomly chosen base cluster.
inline SyntheticData generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.5, 1.5);
  const int d = spec.dim;
  const int rank = spec.variation_rank > 0 ? spec.variation_rank : std::max(1, d / 4);
  const double cs2 = spec.covariance_scale * spec.covariance_scale;
  auto gaussian = [&](int rows, int cols) {
    Matrix m(rows, cols);
    for (int j = 0; j < cols; ++j)
      for (int i = 0; i < rows; ++i) m(i, j) = normal(rng);
    return m;
  };

  const Matrix shared_basis = detail::orthonormal_columns(gaussian(d, rank));
  Vector offset = gaussian(d, 1).col(0);
  offset *= spec.mean_offset / std::max(offset.norm(), 1e-12);

  auto make_covariance = [&]() {
    const Matrix basis = detail::orthonormal_columns(
        shared_basis + spec.direction_jitter / std::sqrt(double(d)) * gaussian(d, rank));
    Vector eig(rank);
    for (int k = 0; k < rank; ++k) eig(k) = unif(rng);
    Matrix cov = basis * eig.asDiagonal() * basis.transpose();
    cov.diagonal().array() += spec.isotropic_floor;
    cov *= cs2;
    return Matrix(0.5 * (cov + cov.transpose()));
  };

  SyntheticTruth truth;
  const int total_classes = spec.base_classes + spec.novel_classes;
  const int base_clusters = spec.base_classes * spec.clusters_per_class;
  for (int c = 0; c < total_classes; ++c) {
    const Vector center = offset + spec.mean_scale / std::sqrt(double(d)) * gaussian(d, 1).col(0);
    for (int k = 0; k < spec.clusters_per_class; ++k) {
      truth.cluster_means.push_back(
          center + spec.cluster_spread * spec.mean_scale / std::sqrt(double(d)) * gaussian(d, 1).col(0));
      truth.cluster_class.push_back(static_cast<ClassId>(c));
      if (c >= spec.base_classes && spec.shared_variation) {
        const int src = std::uniform_int_distribution<int>(0, base_clusters - 1)(rng);
        truth.cluster_covariances.push_back(truth.cluster_covariances[static_cast<std::size_t>(src)]);
        truth.covariance_source.push_back(src);
      } else {
        truth.cluster_covariances.push_back(make_covariance());
        truth.covariance_source.push_back(-1);
      }
    }
  }

  std::vector<Vector> wsi_offsets;
  for (int w = 0; w < spec.wsi_count; ++w)
    wsi_offsets.push_back(spec.wsi_style * spec.covariance_scale * shared_basis *
                          gaussian(rank, 1).col(0));

  std::vector<Matrix> factors;
  for (const auto& cov : truth.cluster_covariances) {
    if (cs2 == 0.0) {
      factors.push_back(Matrix::Zero(d, d));
      continue;
    }
    Eigen::LLT<Matrix> llt(cov);
    if (llt.info() != Eigen::Success) throw Error("store", "synthetic covariance not positive definite");
    factors.push_back(llt.matrixL());
  }

  auto emit = [&](int first_class, int count) {
    EmbeddingDataset ds;
    const Eigen::Index n = static_cast<Eigen::Index>(count) * spec.samples_per_class;
    ds.features.resize(n, d);
    ds.labels.emplace();
    if (spec.wsi_count > 0) ds.wsi_ids.emplace();
    Eigen::Index row = 0;
    std::uniform_int_distribution<int> pick_wsi(0, std::max(0, spec.wsi_count - 1));
    for (int c = first_class; c < first_class + count; ++c) {
      for (int s = 0; s < spec.samples_per_class; ++s, ++row) {
        const auto cluster = static_cast<std::size_t>(c * spec.clusters_per_class + s % spec.clusters_per_class);
        Vector x = truth.cluster_means[cluster] + factors[cluster] * gaussian(d, 1).col(0);
        if (spec.wsi_count > 0) {
          const int w = pick_wsi(rng);
          x += wsi_offsets[static_cast<std::size_t>(w)];
          ds.wsi_ids->push_back(static_cast<std::uint32_t>(w));
        }
        ds.features.row(row) = x.cast<float>().transpose();
        ds.labels->push_back(static_cast<ClassId>(c));
      }
    }
    return ds;
  };

  SyntheticData out;
  out.base = emit(0, spec.base_classes);
  out.novel = emit(spec.base_classes, spec.novel_classes);
  out.truth = std::move(truth);
  out.base.validate();
  out.novel.validate();
  return out;
}

}  // namespace latentaug
