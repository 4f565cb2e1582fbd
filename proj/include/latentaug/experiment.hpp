#pragma once

// Config-driven experiment runner: data preparation, dictionary building,
// per-task augment/fit/predict/score, aggregation, reports and sweeps.

#include "latentaug/classifiers.hpp"
#include "latentaug/cluster.hpp"
#include "latentaug/common.hpp"
#include "latentaug/dictionary.hpp"
#include "latentaug/metatask.hpp"
#include "latentaug/metrics.hpp"
#include "latentaug/store.hpp"

#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

namespace latentaug {

using Json = nlohmann::json;

enum class AugmentMethod { None, LA, DC };

inline std::string to_string(AugmentMethod m) {
  switch (m) {
    case AugmentMethod::None: return "none";
    case AugmentMethod::LA: return "la";
    case AugmentMethod::DC: return "dc";
  }
  return "?";
}

inline AugmentMethod parse_augment_method(const std::string& s) {
  if (s == "none") return AugmentMethod::None;
  if (s == "la") return AugmentMethod::LA;
  if (s == "dc") return AugmentMethod::DC;
  throw Error("config", "unknown augmentation method '" + s + "'");
}

struct DataConfig {
  std::string source = "synthetic";  // "synthetic" or "files"
  SyntheticSpec synthetic;
  double holdout_fraction = 0.5;  // synthetic GFSL: share of base samples used for the dictionary
  std::string base_path;
  std::string eval_path;
  std::optional<ClassId> leave_out_class;
};

struct DictionaryConfig {
  int prototypes = 16;
  CovarianceType cov_type = CovarianceType::Full;
  double ridge_eps = 1e-6;
  bool supervised = false;
  std::uint64_t kmeans_seed = 66;
  int max_iters = 100;
  double tol = 1e-4;
};

struct AugmentationConfig {
  AugmentMethod method = AugmentMethod::LA;
  int count = 100;
  bool renormalize = false;
  int dc_k = 1;
  double dc_alpha = 0.0;
};

struct ClassifierConfig {
  std::string kind = "ridge";  // centroid | logistic | ridge
  double ridge_alpha = 1.0;
  double logistic_l2 = 1.0;
  int max_iters = 500;
  double tol = 1e-6;
};

struct ProtocolConfig {
  TaskMode mode = TaskMode::GFSL;
  int n_way = 5;
  int k_shot = 5;
  int q_query = 15;
  ShotSelection selection = ShotSelection::Uniform;
  std::optional<std::vector<std::uint32_t>> support_wsis;
  std::optional<std::vector<std::uint32_t>> query_wsis;
  std::optional<std::vector<ClassId>> novel_classes;   // GFSL novel group, or FSL label set
  std::optional<std::vector<ClassId>> middle_classes;  // FSL grouped metrics
  std::optional<std::vector<ClassId>> out_classes;
  int num_tasks = 1000;
};

struct OutputConfig {
  std::string dir = "results";
  bool write_tasks = false;
};

struct ExperimentConfig {
  std::uint64_t master_seed = 66;
  bool normalize = true;
  bool baseline = false;  // also score method=none on the same series
  DataConfig data;
  DictionaryConfig dictionary;
  AugmentationConfig augmentation;
  ClassifierConfig classifier;
  ProtocolConfig protocol;
  OutputConfig output;
};

// ---------------------------------------------------------------------------
// JSON <-> config. Unknown keys are rejected.

namespace detail {

inline void check_keys(const Json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw Error("config", where + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || it.key() == a;
    if (!ok) throw Error("config", "unknown key '" + it.key() + "' in " + where);
  }
}

template <typename T>
void read(const Json& j, const char* key, T& out) {
  if (!j.contains(key) || j.at(key).is_null()) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw Error("config", std::string("bad value for '") + key + "': " + e.what());
  }
}

template <typename T>
void read(const Json& j, const char* key, std::optional<T>& out) {
  if (!j.contains(key)) return;
  if (j.at(key).is_null()) {
    out.reset();
    return;
  }
  T v;
  read(j, key, v);
  out = std::move(v);
}

template <typename T>
Json opt_json(const std::optional<T>& v) {
  return v ? Json(*v) : Json(nullptr);
}

}  // namespace detail

inline Json synthetic_to_json(const SyntheticSpec& s) {
  return {{"dim", s.dim},
          {"base_classes", s.base_classes},
          {"novel_classes", s.novel_classes},
          {"clusters_per_class", s.clusters_per_class},
          {"samples_per_class", s.samples_per_class},
          {"mean_scale", s.mean_scale},
          {"covariance_scale", s.covariance_scale},
          {"shared_variation", s.shared_variation},
          {"wsi_count", s.wsi_count},
          {"seed", s.seed},
          {"variation_rank", s.variation_rank},
          {"direction_jitter", s.direction_jitter},
          {"isotropic_floor", s.isotropic_floor},
          {"cluster_spread", s.cluster_spread},
          {"mean_offset", s.mean_offset},
          {"wsi_style", s.wsi_style}};
}

inline SyntheticSpec synthetic_from_json(const Json& j) {
  detail::check_keys(j,
                     {"dim", "base_classes", "novel_classes", "clusters_per_class", "samples_per_class", "mean_scale",
                      "covariance_scale", "shared_variation", "wsi_count", "seed", "variation_rank",
                      "direction_jitter", "isotropic_floor", "cluster_spread", "mean_offset", "wsi_style"},
                     "data.synthetic");
  SyntheticSpec s;
  detail::read(j, "dim", s.dim);
  detail::read(j, "base_classes", s.base_classes);
  detail::read(j, "novel_classes", s.novel_classes);
  detail::read(j, "clusters_per_class", s.clusters_per_class);
  detail::read(j, "samples_per_class", s.samples_per_class);
  detail::read(j, "mean_scale", s.mean_scale);
  detail::read(j, "covariance_scale", s.covariance_scale);
  detail::read(j, "shared_variation", s.shared_variation);
  detail::read(j, "wsi_count", s.wsi_count);
  detail::read(j, "seed", s.seed);
  detail::read(j, "variation_rank", s.variation_rank);
  detail::read(j, "direction_jitter", s.direction_jitter);
  detail::read(j, "isotropic_floor", s.isotropic_floor);
  detail::read(j, "cluster_spread", s.cluster_spread);
  detail::read(j, "mean_offset", s.mean_offset);
  detail::read(j, "wsi_style", s.wsi_style);
  return s;
}

inline Json config_to_json(const ExperimentConfig& c) {
  Json j;
  j["master_seed"] = c.master_seed;
  j["normalize"] = c.normalize;
  j["baseline"] = c.baseline;
  j["data"] = {{"source", c.data.source},
               {"synthetic", synthetic_to_json(c.data.synthetic)},
               {"holdout_fraction", c.data.holdout_fraction},
               {"base", c.data.base_path},
               {"eval", c.data.eval_path},
               {"leave_out_class", detail::opt_json(c.data.leave_out_class)}};
  j["dictionary"] = {{"prototypes", c.dictionary.prototypes},
                     {"cov_type", to_string(c.dictionary.cov_type)},
                     {"ridge_eps", c.dictionary.ridge_eps},
                     {"supervised", c.dictionary.supervised},
                     {"kmeans_seed", c.dictionary.kmeans_seed},
                     {"max_iters", c.dictionary.max_iters},
                     {"tol", c.dictionary.tol}};
  j["augmentation"] = {{"method", to_string(c.augmentation.method)},
                       {"count", c.augmentation.count},
                       {"renormalize", c.augmentation.renormalize},
                       {"dc_k", c.augmentation.dc_k},
                       {"dc_alpha", c.augmentation.dc_alpha}};
  j["classifier"] = {{"kind", c.classifier.kind},
                     {"ridge_alpha", c.classifier.ridge_alpha},
                     {"logistic_l2", c.classifier.logistic_l2},
                     {"max_iters", c.classifier.max_iters},
                     {"tol", c.classifier.tol}};
  j["protocol"] = {{"mode", to_string(c.protocol.mode)},
                   {"n_way", c.protocol.n_way},
                   {"k_shot", c.protocol.k_shot},
                   {"q_query", c.protocol.q_query},
                   {"selection", to_string(c.protocol.selection)},
                   {"support_wsis", detail::opt_json(c.protocol.support_wsis)},
                   {"query_wsis", detail::opt_json(c.protocol.query_wsis)},
                   {"novel_classes", detail::opt_json(c.protocol.novel_classes)},
                   {"middle_classes", detail::opt_json(c.protocol.middle_classes)},
                   {"out_classes", detail::opt_json(c.protocol.out_classes)},
                   {"num_tasks", c.protocol.num_tasks}};
  j["output"] = {{"dir", c.output.dir}, {"write_tasks", c.output.write_tasks}};
  return j;
}

/// Reads a config; a replay manifest ({"config": {...}, ...}) is accepted too.
inline ExperimentConfig config_from_json(const Json& root) {
  const Json& j = root.contains("config") && root.contains("config_hash") ? root.at("config") : root;
  detail::check_keys(j, {"master_seed", "normalize", "baseline", "data", "dictionary", "augmentation", "classifier",
                         "protocol", "output"},
                     "config");
  ExperimentConfig c;
  detail::read(j, "master_seed", c.master_seed);
  detail::read(j, "normalize", c.normalize);
  detail::read(j, "baseline", c.baseline);
  if (j.contains("data")) {
    const auto& d = j["data"];
    detail::check_keys(d, {"source", "synthetic", "holdout_fraction", "base", "eval", "leave_out_class"}, "data");
    detail::read(d, "source", c.data.source);
    if (d.contains("synthetic")) c.data.synthetic = synthetic_from_json(d["synthetic"]);
    detail::read(d, "holdout_fraction", c.data.holdout_fraction);
    detail::read(d, "base", c.data.base_path);
    detail::read(d, "eval", c.data.eval_path);
    detail::read(d, "leave_out_class", c.data.leave_out_class);
  }
  if (j.contains("dictionary")) {
    const auto& d = j["dictionary"];
    detail::check_keys(d, {"prototypes", "cov_type", "ridge_eps", "supervised", "kmeans_seed", "max_iters", "tol"},
                       "dictionary");
    detail::read(d, "prototypes", c.dictionary.prototypes);
    std::string cov = to_string(c.dictionary.cov_type);
    detail::read(d, "cov_type", cov);
    c.dictionary.cov_type = parse_covariance_type(cov);
    detail::read(d, "ridge_eps", c.dictionary.ridge_eps);
    detail::read(d, "supervised", c.dictionary.supervised);
    detail::read(d, "kmeans_seed", c.dictionary.kmeans_seed);
    detail::read(d, "max_iters", c.dictionary.max_iters);
    detail::read(d, "tol", c.dictionary.tol);
  }
  if (j.contains("augmentation")) {
    const auto& a = j["augmentation"];
    detail::check_keys(a, {"method", "count", "renormalize", "dc_k", "dc_alpha"}, "augmentation");
    std::string method = to_string(c.augmentation.method);
    detail::read(a, "method", method);
    c.augmentation.method = parse_augment_method(method);
    detail::read(a, "count", c.augmentation.count);
    detail::read(a, "renormalize", c.augmentation.renormalize);
    detail::read(a, "dc_k", c.augmentation.dc_k);
    detail::read(a, "dc_alpha", c.augmentation.dc_alpha);
  }
  if (j.contains("classifier")) {
    const auto& k = j["classifier"];
    detail::check_keys(k, {"kind", "ridge_alpha", "logistic_l2", "max_iters", "tol"}, "classifier");
    detail::read(k, "kind", c.classifier.kind);
    detail::read(k, "ridge_alpha", c.classifier.ridge_alpha);
    detail::read(k, "logistic_l2", c.classifier.logistic_l2);
    detail::read(k, "max_iters", c.classifier.max_iters);
    detail::read(k, "tol", c.classifier.tol);
  }
  if (j.contains("protocol")) {
    const auto& p = j["protocol"];
    detail::check_keys(p, {"mode", "n_way", "k_shot", "q_query", "selection", "support_wsis", "query_wsis",
                           "novel_classes", "middle_classes", "out_classes", "num_tasks"},
                       "protocol");
    std::string mode = to_string(c.protocol.mode), sel = to_string(c.protocol.selection);
    detail::read(p, "mode", mode);
    detail::read(p, "selection", sel);
    c.protocol.mode = parse_task_mode(mode);
    c.protocol.selection = parse_shot_selection(sel);
    detail::read(p, "n_way", c.protocol.n_way);
    detail::read(p, "k_shot", c.protocol.k_shot);
    detail::read(p, "q_query", c.protocol.q_query);
    detail::read(p, "support_wsis", c.protocol.support_wsis);
    detail::read(p, "query_wsis", c.protocol.query_wsis);
    detail::read(p, "novel_classes", c.protocol.novel_classes);
    detail::read(p, "middle_classes", c.protocol.middle_classes);
    detail::read(p, "out_classes", c.protocol.out_classes);
    detail::read(p, "num_tasks", c.protocol.num_tasks);
  }
  if (j.contains("output")) {
    const auto& o = j["output"];
    detail::check_keys(o, {"dir", "write_tasks"}, "output");
    detail::read(o, "dir", c.output.dir);
    detail::read(o, "write_tasks", c.output.write_tasks);
  }
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("config", "cannot open " + path);
  try {
    return config_from_json(Json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error("config", path + ": " + e.what());
  }
}

/// Checks that do not need the data.
inline void validate_config(const ExperimentConfig& c) {
  if (c.data.source != "synthetic" && c.data.source != "files")
    throw Error("config", "data.source must be 'synthetic' or 'files'");
  if (c.data.source == "synthetic") c.data.synthetic.validate();
  if (c.data.source == "files" && (c.data.base_path.empty() || c.data.eval_path.empty()))
    throw Error("config", "data.base and data.eval are required for file sources");
  if (!(c.data.holdout_fraction > 0.0 && c.data.holdout_fraction < 1.0))
    throw Error("config", "data.holdout_fraction must be in (0, 1)");
  if (c.dictionary.prototypes < 1) throw Error("config", "dictionary.prototypes must be at least 1");
  if (c.dictionary.ridge_eps < 0.0) throw Error("config", "dictionary.ridge_eps must be >= 0");
  if (c.dictionary.max_iters < 1) throw Error("config", "dictionary.max_iters must be at least 1");
  if (c.augmentation.count < 1) throw Error("config", "augmentation.count must be at least 1");
  if (c.augmentation.dc_k < 1) throw Error("config", "augmentation.dc_k must be at least 1");
  if (c.classifier.kind != "centroid" && c.classifier.kind != "logistic" && c.classifier.kind != "ridge")
    throw Error("config", "classifier.kind must be centroid, logistic or ridge");
  if (!(c.classifier.ridge_alpha > 0.0)) throw Error("config", "classifier.ridge_alpha must be positive");
  if (!(c.classifier.logistic_l2 > 0.0)) throw Error("config", "classifier.logistic_l2 must be positive");
  if (c.protocol.num_tasks < 2) throw Error("config", "protocol.num_tasks must be at least 2 for confidence intervals");
  if (c.protocol.middle_classes.has_value() != c.protocol.out_classes.has_value())
    throw Error("config", "protocol.middle_classes and protocol.out_classes go together");
}

/// FNV-1a over the canonical dump of the config without its output section.
inline std::string config_hash(const ExperimentConfig& c) {
  Json j = config_to_json(c);
  j.erase("output");
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// Data preparation

struct PreparedData {
  EmbeddingDataset base;  // dictionary source
  EmbeddingDataset eval;  // task source
  TaskProtocol protocol;
  std::vector<ClassId> novel_group;  // GFSL
  std::optional<std::vector<ClassId>> middle_group, out_group;
};

inline PreparedData prepare_data(const ExperimentConfig& c) {
  validate_config(c);
  PreparedData p;
  std::vector<ClassId> novel_labels;
  if (c.data.source == "synthetic") {
    auto syn = generate_synthetic(c.data.synthetic);
    novel_labels = syn.novel.classes();
    if (c.protocol.mode == TaskMode::GFSL) {
      auto [dict_part, held_out] =
          split_per_class(syn.base, c.data.holdout_fraction, derive_seed(c.data.synthetic.seed, 0x5eed));
      p.base = std::move(dict_part);
      p.eval = concat(held_out, syn.novel);
    } else {
      p.base = std::move(syn.base);
      p.eval = std::move(syn.novel);
    }
  } else {
    p.base = load_embeddings_auto(c.data.base_path);
    p.eval = load_embeddings_auto(c.data.eval_path);
    if (c.data.leave_out_class) {
      p.base = leave_one_class_out(p.base, *c.data.leave_out_class).base;
      novel_labels = {*c.data.leave_out_class};
    }
  }
  if (p.base.dim() != p.eval.dim()) throw Error("config", "base and eval datasets differ in dimension");
  if (!p.eval.labels) throw Error("config", "evaluation dataset needs labels");
  if (c.normalize) {
    p.base = l2_normalize(p.base);
    p.eval = l2_normalize(p.eval);
  }
  if (!c.dictionary.supervised && c.augmentation.method == AugmentMethod::LA &&
      c.dictionary.prototypes > p.base.size())
    throw Error("config", "dictionary.prototypes=" + std::to_string(c.dictionary.prototypes) +
                              " exceeds the " + std::to_string(p.base.size()) + " base samples");
  if ((c.dictionary.supervised || c.augmentation.method == AugmentMethod::DC) && !p.base.labels)
    throw Error("config", "supervised dictionary and DC need base labels");

  p.protocol.mode = c.protocol.mode;
  p.protocol.n_way = c.protocol.n_way;
  p.protocol.k_shot = c.protocol.k_shot;
  p.protocol.q_query = c.protocol.q_query;
  p.protocol.selection = c.protocol.selection;
  p.protocol.master_seed = c.master_seed;
  p.protocol.num_tasks = c.protocol.num_tasks;
  if (c.protocol.support_wsis)
    p.protocol.support_pool.emplace(c.protocol.support_wsis->begin(), c.protocol.support_wsis->end());
  if (c.protocol.query_wsis)
    p.protocol.query_pool.emplace(c.protocol.query_wsis->begin(), c.protocol.query_wsis->end());

  if (c.protocol.mode == TaskMode::GFSL) {
    p.novel_group = c.protocol.novel_classes ? *c.protocol.novel_classes : novel_labels;
    if (p.novel_group.empty())
      throw Error("config", "GFSL needs protocol.novel_classes (or data.leave_out_class) to group metrics");
    const auto all = p.eval.classes();
    for (auto n : p.novel_group)
      if (!std::binary_search(all.begin(), all.end(), n))
        throw Error("config", "novel class " + std::to_string(n) + " absent from the evaluation set");
    if (p.novel_group.size() >= all.size()) throw Error("config", "GFSL needs at least one base class in the evaluation set");
  } else {
    if (c.protocol.novel_classes) p.protocol.eligible_classes = *c.protocol.novel_classes;
    p.middle_group = c.protocol.middle_classes;
    p.out_group = c.protocol.out_classes;
  }
  p.protocol.validate();
  return p;
}

// ---------------------------------------------------------------------------
// Running

/// Per-method augmentation state built once from the base data.
struct AugmentState {
  AugmentMethod method = AugmentMethod::None;
  BaseDictionary dictionary;
  ClassStats class_stats;
};

inline AugmentState build_augment_state(const ExperimentConfig& c, const PreparedData& p, AugmentMethod method) {
  AugmentState s;
  s.method = method;
  if (method == AugmentMethod::LA) {
    if (c.dictionary.supervised) {
      s.dictionary = build_supervised_dictionary(p.base, c.dictionary.cov_type, c.dictionary.ridge_eps);
    } else {
      const auto model = kmeans_fit(
          p.base, {c.dictionary.prototypes, c.dictionary.kmeans_seed, c.dictionary.max_iters, c.dictionary.tol});
      s.dictionary = build_dictionary(p.base, model.assignments, model.clusters(), c.dictionary.cov_type,
                                      c.dictionary.ridge_eps);
    }
  } else if (method == AugmentMethod::DC) {
    s.class_stats = compute_class_stats(p.base);
  }
  return s;
}

/// Per-task values, one vector per reported metric name.
struct MethodRun {
  std::string method;
  std::vector<std::string> metric_names;
  std::vector<std::vector<double>> per_task;  // [task][metric]
};

inline std::vector<std::string> metric_names(const PreparedData& p) {
  if (p.protocol.mode == TaskMode::GFSL) return {"Base", "Novel", "HarmMean"};
  if (p.middle_group) return {"Middle", "Out", "HarmMean"};
  return {"F1"};
}

inline std::vector<double> score_task(const PreparedData& p, const MetaTask& t, const Labels& pred) {
  const auto score = f1_per_class(pred, t.query_labels, t.task_classes, t.task_index);
  if (p.protocol.mode == TaskMode::GFSL) {
    std::vector<ClassId> base;
    for (auto c : t.task_classes)
      if (std::find(p.novel_group.begin(), p.novel_group.end(), c) == p.novel_group.end()) base.push_back(c);
    const auto g = group_task_metrics(score, base, p.novel_group);
    return {g.first, g.second, g.hmean};
  }
  if (p.middle_group) {
    std::vector<ClassId> mid, out;
    for (auto c : *p.middle_group)
      if (score.f1.count(c)) mid.push_back(c);
    for (auto c : *p.out_group)
      if (score.f1.count(c)) out.push_back(c);
    const auto g = mixture_task_metrics(score, mid, out);
    return {g.first, g.second, g.hmean};
  }
  double acc = 0.0;
  for (auto& [c, f] : score.f1) acc += f;
  return {acc / static_cast<double>(score.f1.size())};
}

inline Labels fit_and_predict(const ClassifierConfig& k, const Matrix& x, const Labels& y, const Matrix& q) {
  if (k.kind == "centroid") return predict_nearest_centroid(fit_nearest_centroid(x, y), q);
  if (k.kind == "logistic")
    return predict_linear(fit_logistic(x, y, {k.logistic_l2, k.max_iters, k.tol}), q);
  return predict_linear(fit_ridge(x, y, k.ridge_alpha), q);
}

inline Matrix augment_support(const ExperimentConfig& c, const AugmentState& s, const Matrix& support,
                              std::uint64_t task_seed) {
  if (s.method == AugmentMethod::None) return support;
  const int t = c.augmentation.count;
  Matrix out(support.rows() * t, support.cols());
  for (Eigen::Index i = 0; i < support.rows(); ++i) {
    const auto seed = derive_seed(task_seed, static_cast<std::uint64_t>(i));
    const Vector z = support.row(i).transpose();
    if (s.method == AugmentMethod::LA)
      out.middleRows(i * t, t) = augment(s.dictionary, z, {t, c.augmentation.renormalize}, seed);
    else
      out.middleRows(i * t, t) = calibrate_and_sample(
          s.class_stats, z, {c.augmentation.dc_k, c.augmentation.dc_alpha, t, c.dictionary.ridge_eps}, seed);
  }
  return out;
}

inline MethodRun run_method(const ExperimentConfig& c, const PreparedData& p, const std::vector<MetaTask>& tasks,
                            const AugmentState& state, unsigned threads = thread_count()) {
  MethodRun run;
  run.method = to_string(state.method);
  run.metric_names = metric_names(p);
  run.per_task.resize(tasks.size());
  const Matrix eval = p.eval.features.cast<double>();
  const std::uint64_t aug_stream = derive_seed(c.master_seed, 0xa06a06a0ULL);
  parallel_for(tasks.size(), [&](std::size_t ti) {
    const auto& t = tasks[ti];
    try {
      Matrix support(static_cast<Eigen::Index>(t.support_indices.size()), eval.cols());
      for (std::size_t r = 0; r < t.support_indices.size(); ++r)
        support.row(static_cast<Eigen::Index>(r)) = eval.row(static_cast<Eigen::Index>(t.support_indices[r]));
      Matrix query(static_cast<Eigen::Index>(t.query_indices.size()), eval.cols());
      for (std::size_t r = 0; r < t.query_indices.size(); ++r)
        query.row(static_cast<Eigen::Index>(r)) = eval.row(static_cast<Eigen::Index>(t.query_indices[r]));
      const Matrix x = augment_support(c, state, support, derive_seed(aug_stream, static_cast<std::uint64_t>(t.task_index)));
      const auto reps = static_cast<std::size_t>(x.rows() / support.rows());
      Labels y;
      y.reserve(static_cast<std::size_t>(x.rows()));
      for (auto label : t.support_labels) y.insert(y.end(), reps, label);
      const auto pred = fit_and_predict(c.classifier, x, y, query);
      run.per_task[ti] = score_task(p, t, pred);
    } catch (const Error& e) {
      throw Error(e.module(), "task " + std::to_string(t.task_index) + ": " + e.detail());
    }
  }, threads);
  return run;
}

struct ReportRow {
  std::string method;
  std::string setting;
  int num_tasks = 0;
  std::vector<std::string> names;
  std::vector<MeanCi> values;

  const MeanCi& at(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return values[i];
    throw Error("metrics", "no metric named " + name);
  }
};

struct AggregateReport {
  std::string config_hash;
  std::vector<ReportRow> rows;
  std::vector<std::string> notes;
};

inline std::string setting_name(const ExperimentConfig& c) {
  std::string s = to_string(c.protocol.mode);
  if (c.protocol.mode == TaskMode::FSL) s += "-" + std::to_string(c.protocol.n_way) + "way";
  s += "-" + std::to_string(c.protocol.k_shot) + "shot-" + to_string(c.protocol.selection);
  return s;
}

inline ReportRow summarize(const ExperimentConfig& c, const MethodRun& run) {
  ReportRow row;
  row.method = run.method;
  row.setting = setting_name(c);
  row.num_tasks = static_cast<int>(run.per_task.size());
  row.names = run.metric_names;
  for (std::size_t m = 0; m < run.metric_names.size(); ++m) {
    std::vector<double> v;
    v.reserve(run.per_task.size());
    for (const auto& t : run.per_task) v.push_back(t[m]);
    row.values.push_back(aggregate(v));
  }
  return row;
}

struct ExperimentResult {
  AggregateReport report;
  std::vector<MetaTask> tasks;
  std::vector<MethodRun> runs;
};

/// Runs the configured method (and the no-augmentation baseline when
/// requested) on one shared task series.
inline ExperimentResult run_experiment(const ExperimentConfig& c, unsigned threads = thread_count()) {
  const auto prepared = prepare_data(c);
  ExperimentResult r;
  r.tasks = sample_series(prepared.eval, prepared.protocol, threads);
  r.report.config_hash = config_hash(c);
  std::vector<AugmentMethod> methods{c.augmentation.method};
  if (c.baseline && c.augmentation.method != AugmentMethod::None) methods.push_back(AugmentMethod::None);
  for (auto m : methods) {
    const auto state = build_augment_state(c, prepared, m);
    r.runs.push_back(run_method(c, prepared, r.tasks, state, threads));
    r.report.rows.push_back(summarize(c, r.runs.back()));
  }
  r.report.notes.push_back("ci95 is 1.96*s/sqrt(I) over all pooled tasks");
  return r;
}

// ---------------------------------------------------------------------------
// Output

inline std::string fmt6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

inline Json report_to_json(const AggregateReport& r) {
  Json rows = Json::array();
  for (const auto& row : r.rows) {
    Json metrics = Json::object();
    for (std::size_t i = 0; i < row.names.size(); ++i)
      metrics[row.names[i]] = {{"mean", std::stod(fmt6(row.values[i].mean))},
                               {"ci95", std::stod(fmt6(row.values[i].ci95))}};
    rows.push_back({{"method", row.method}, {"setting", row.setting}, {"num_tasks", row.num_tasks}, {"metrics", metrics}});
  }
  return {{"version", kVersion}, {"config_hash", r.config_hash}, {"rows", rows}, {"notes", r.notes}};
}

/// One row per method x setting: metric means followed by their CI half-widths.
inline std::string report_to_csv(const AggregateReport& r) {
  std::string out;
  if (r.rows.empty()) return out;
  out += "method,setting,num_tasks";
  for (const auto& n : r.rows.front().names) out += "," + n + "," + n + "_ci95";
  out += "\n";
  for (const auto& row : r.rows) {
    out += row.method + "," + row.setting + "," + std::to_string(row.num_tasks);
    for (const auto& v : row.values) out += "," + fmt6(v.mean) + "," + fmt6(v.ci95);
    out += "\n";
  }
  return out;
}

inline Json manifest_json(const ExperimentConfig& c) {
  return {{"version", kVersion}, {"config_hash", config_hash(c)}, {"config", config_to_json(c)}};
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("report", "cannot write " + path.string());
  out << text;
}

/// Writes report.csv, report.json, task_scores.csv, manifest.json and
/// optionally tasks.jsonl into dir.
inline void write_experiment_outputs(const ExperimentResult& r, const ExperimentConfig& c,
                                     const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_text(dir / "report.csv", report_to_csv(r.report));
  write_text(dir / "report.json", report_to_json(r.report).dump(2) + "\n");
  write_text(dir / "manifest.json", manifest_json(c).dump(2) + "\n");
  std::string scores = "task,method";
  if (!r.runs.empty())
    for (const auto& n : r.runs.front().metric_names) scores += "," + n;
  scores += "\n";
  for (const auto& run : r.runs)
    for (std::size_t t = 0; t < run.per_task.size(); ++t) {
      scores += std::to_string(r.tasks[t].task_index) + "," + run.method;
      for (double v : run.per_task[t]) scores += "," + fmt6(v);
      scores += "\n";
    }
  write_text(dir / "task_scores.csv", scores);
  if (c.output.write_tasks) write_tasks_jsonl(r.tasks, (dir / "tasks.jsonl").string());
}

// ---------------------------------------------------------------------------
// Ablation sweeps

enum class SweepAxis { Prototypes, CovType, AugCount, Seed };

inline SweepAxis parse_sweep_axis(const std::string& s) {
  if (s == "prototypes") return SweepAxis::Prototypes;
  if (s == "cov_type") return SweepAxis::CovType;
  if (s == "aug_count") return SweepAxis::AugCount;
  if (s == "seed") return SweepAxis::Seed;
  throw Error("config", "unknown sweep axis '" + s + "'");
}

inline std::string to_string(SweepAxis a) {
  switch (a) {
    case SweepAxis::Prototypes: return "prototypes";
    case SweepAxis::CovType: return "cov_type";
    case SweepAxis::AugCount: return "aug_count";
    case SweepAxis::Seed: return "seed";
  }
  return "?";
}

inline ExperimentConfig apply_axis(ExperimentConfig c, SweepAxis axis, const std::string& value) {
  try {
    switch (axis) {
      case SweepAxis::Prototypes: c.dictionary.prototypes = std::stoi(value); break;
      case SweepAxis::CovType: c.dictionary.cov_type = parse_covariance_type(value); break;
      case SweepAxis::AugCount: c.augmentation.count = std::stoi(value); break;
      case SweepAxis::Seed: c.dictionary.kmeans_seed = std::stoull(value); break;
    }
  } catch (const std::logic_error&) {
    throw Error("config", "bad sweep value '" + value + "' for axis " + to_string(axis));
  }
  return c;
}

struct SweepResult {
  SweepAxis axis;
  std::vector<std::string> values;
  std::vector<ReportRow> rows;  // one per value, same order
  std::optional<ReportRow> baseline;
};

/// One run per value on a single shared task series. Data preparation and
/// task sampling do not depend on any sweep axis, so they happen once.
inline SweepResult run_ablation_sweep(const ExperimentConfig& base_config, SweepAxis axis,
                                      const std::vector<std::string>& values, unsigned threads = thread_count()) {
  if (values.empty()) throw Error("config", "sweep needs at least one value");
  std::vector<ExperimentConfig> configs;
  for (const auto& v : values) {
    configs.push_back(apply_axis(base_config, axis, v));
    validate_config(configs.back());
  }
  const auto prepared = prepare_data(configs.front());
  for (const auto& c : configs)
    if (!c.dictionary.supervised && c.augmentation.method == AugmentMethod::LA && c.dictionary.prototypes > prepared.base.size())
      throw Error("config", "dictionary.prototypes exceeds the base sample count");
  const auto tasks = sample_series(prepared.eval, prepared.protocol, threads);
  SweepResult out;
  out.axis = axis;
  out.values = values;
  for (const auto& c : configs) {
    const auto state = build_augment_state(c, prepared, c.augmentation.method);
    out.rows.push_back(summarize(c, run_method(c, prepared, tasks, state, threads)));
  }
  if (base_config.baseline && base_config.augmentation.method != AugmentMethod::None) {
    const auto state = build_augment_state(base_config, prepared, AugmentMethod::None);
    out.baseline = summarize(base_config, run_method(base_config, prepared, tasks, state, threads));
  }
  return out;
}

/// Long format: axis,value,method,setting,metric,mean,ci95. The baseline,
/// when present, uses the value "baseline".
inline std::string sweep_to_csv(const SweepResult& s) {
  std::string out = "axis,value,method,setting,metric,mean,ci95\n";
  auto emit = [&](const std::string& value, const ReportRow& row) {
    for (std::size_t i = 0; i < row.names.size(); ++i)
      out += to_string(s.axis) + "," + value + "," + row.method + "," + row.setting + "," + row.names[i] + "," +
             fmt6(row.values[i].mean) + "," + fmt6(row.values[i].ci95) + "\n";
  };
  for (std::size_t v = 0; v < s.values.size(); ++v) emit(s.values[v], s.rows[v]);
  if (s.baseline) emit("baseline", *s.baseline);
  return out;
}

}  // namespace latentaug
