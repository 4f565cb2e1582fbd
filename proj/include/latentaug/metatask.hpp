#pragma once

// N-way K-shot Q-query task sampling under FSL/GFSL with uniform,
// heterogeneous-WSI and homogeneous-WSI shot selection.

#include "latentaug/common.hpp"
#include "latentaug/store.hpp"

#include <nlohmann/json.hpp>

#include <map>
#include <optional>
#include <set>

namespace latentaug {

enum class TaskMode { FSL, GFSL };
enum class ShotSelection { Uniform, HeteroWSI, HomoWSI };

inline std::string to_string(TaskMode m) { return m == TaskMode::FSL ? "fsl" : "gfsl"; }
inline std::string to_string(ShotSelection s) {
  switch (s) {
    case ShotSelection::Uniform: return "uniform";
    case ShotSelection::HeteroWSI: return "hetero";
    case ShotSelection::HomoWSI: return "homo";
  }
  return "?";
}
inline TaskMode parse_task_mode(const std::string& s) {
  if (s == "fsl") return TaskMode::FSL;
  if (s == "gfsl") return TaskMode::GFSL;
  throw Error("metatask", "unknown task mode '" + s + "'");
}
inline ShotSelection parse_shot_selection(const std::string& s) {
  if (s == "uniform") return ShotSelection::Uniform;
  if (s == "hetero") return ShotSelection::HeteroWSI;
  if (s == "homo") return ShotSelection::HomoWSI;
  throw Error("metatask", "unknown shot selection '" + s + "'");
}

struct TaskProtocol {
  TaskMode mode = TaskMode::FSL;
  int n_way = 5;  // ignored under GFSL: every class in the dataset takes part
  int k_shot = 5;
  int q_query = 15;
  ShotSelection selection = ShotSelection::Uniform;
  std::optional<std::set<std::uint32_t>> support_pool;
  std::optional<std::set<std::uint32_t>> query_pool;
  // FSL only: the novel label set tasks draw from. Defaults to every label.
  std::optional<std::vector<ClassId>> eligible_classes;
  std::uint64_t master_seed = 66;
  int num_tasks = 1000;

  void validate() const {
    if (k_shot < 1) throw Error("metatask", "k_shot must be at least 1");
    if (q_query < 1) throw Error("metatask", "q_query must be at least 1");
    if (num_tasks < 1) throw Error("metatask", "num_tasks must be at least 1");
    if (mode == TaskMode::FSL && n_way < 1) throw Error("metatask", "n_way must be at least 1");
    if (selection == ShotSelection::HeteroWSI && k_shot == 1)
      throw Error("metatask", "heterogeneous selection is undefined for K=1");
    if (support_pool && query_pool)
      for (auto w : *support_pool)
        if (query_pool->count(w)) throw Error("metatask", "support and query WSI pools overlap at " + std::to_string(w));
  }
};

struct MetaTask {
  std::vector<std::size_t> support_indices;
  Labels support_labels;
  std::vector<std::size_t> query_indices;
  Labels query_labels;
  std::vector<ClassId> task_classes;  // ascending
  int task_index = 0;

  bool operator==(const MetaTask&) const = default;
};

/// Precomputes per-class candidate lists so a series does not rescan the
/// dataset for every task.
class TaskSampler {
 public:
  TaskSampler(const EmbeddingDataset& ds, TaskProtocol proto) : ds_(ds), proto_(std::move(proto)) {
    proto_.validate();
    if (!ds.labels) throw Error("metatask", "dataset has no labels");
    if (proto_.selection != ShotSelection::Uniform && !ds.wsi_ids)
      throw Error("metatask", "WSI-constrained selection needs wsi_ids");
    if ((proto_.support_pool || proto_.query_pool) && !ds.wsi_ids)
      throw Error("metatask", "WSI pools need wsi_ids");
    for (std::size_t i = 0; i < ds.labels->size(); ++i) {
      const ClassId c = (*ds.labels)[i];
      all_classes_.insert(c);
      if (in_pool(proto_.support_pool, i)) support_[c].push_back(i);
      if (in_pool(proto_.query_pool, i)) query_[c].push_back(i);
    }
    if (proto_.mode == TaskMode::GFSL) {
      eligible_.assign(all_classes_.begin(), all_classes_.end());
    } else if (proto_.eligible_classes) {
      std::set<ClassId> e(proto_.eligible_classes->begin(), proto_.eligible_classes->end());
      for (auto c : e)
        if (!all_classes_.count(c)) throw Error("metatask", "eligible class " + std::to_string(c) + " absent from dataset");
      eligible_.assign(e.begin(), e.end());
    } else {
      eligible_.assign(all_classes_.begin(), all_classes_.end());
    }
    if (proto_.mode == TaskMode::FSL && static_cast<std::size_t>(proto_.n_way) > eligible_.size())
      throw Error("metatask", "n_way=" + std::to_string(proto_.n_way) + " exceeds the " +
                                  std::to_string(eligible_.size()) + " eligible classes");
  }

  const TaskProtocol& protocol() const { return proto_; }

  MetaTask sample(int task_index) const {
    Rng rng(derive_seed(proto_.master_seed, static_cast<std::uint64_t>(task_index)));
    MetaTask t;
    t.task_index = task_index;
    if (proto_.mode == TaskMode::GFSL) {
      t.task_classes = eligible_;
    } else {
      std::vector<ClassId> pool = eligible_;
      std::shuffle(pool.begin(), pool.end(), rng);
      t.task_classes.assign(pool.begin(), pool.begin() + proto_.n_way);
      std::sort(t.task_classes.begin(), t.task_classes.end());
    }
    for (ClassId c : t.task_classes) {
      const auto supports = pick_supports(c, rng);
      std::set<std::size_t> used(supports.begin(), supports.end());
      std::vector<std::size_t> candidates;
      for (auto i : lookup(query_, c))
        if (!used.count(i)) candidates.push_back(i);
      if (candidates.size() < static_cast<std::size_t>(proto_.q_query))
        throw Error("metatask", "class " + std::to_string(c) + " has " + std::to_string(candidates.size()) +
                                    " query candidates left, need " + std::to_string(proto_.q_query) +
                                    " (task " + std::to_string(task_index) + ")");
      const auto queries = draw(candidates, static_cast<std::size_t>(proto_.q_query), rng);
      for (auto i : supports) t.support_indices.push_back(i), t.support_labels.push_back(c);
      for (auto i : queries) t.query_indices.push_back(i), t.query_labels.push_back(c);
    }
    return t;
  }

 private:
  bool in_pool(const std::optional<std::set<std::uint32_t>>& pool, std::size_t i) const {
    return !pool || pool->count((*ds_.wsi_ids)[i]) > 0;
  }

  static const std::vector<std::size_t>& lookup(const std::map<ClassId, std::vector<std::size_t>>& m, ClassId c) {
    static const std::vector<std::size_t> empty;
    auto it = m.find(c);
    return it == m.end() ? empty : it->second;
  }

  static std::vector<std::size_t> draw(std::vector<std::size_t> from, std::size_t k, Rng& rng) {
    // Partial Fisher-Yates.
    for (std::size_t i = 0; i < k; ++i) {
      std::uniform_int_distribution<std::size_t> u(i, from.size() - 1);
      std::swap(from[i], from[u(rng)]);
    }
    from.resize(k);
    return from;
  }

  std::vector<std::size_t> pick_supports(ClassId c, Rng& rng) const {
    const auto& cand = lookup(support_, c);
    const auto k = static_cast<std::size_t>(proto_.k_shot);
    if (cand.size() < k)
      throw Error("metatask", "class " + std::to_string(c) + " has " + std::to_string(cand.size()) +
                                  " support candidates, need " + std::to_string(k));
    if (proto_.selection == ShotSelection::Uniform) return draw(cand, k, rng);

    std::map<std::uint32_t, std::vector<std::size_t>> by_wsi;
    for (auto i : cand) by_wsi[(*ds_.wsi_ids)[i]].push_back(i);

    if (proto_.selection == ShotSelection::HomoWSI) {
      std::vector<std::uint32_t> ok;
      for (auto& [w, members] : by_wsi)
        if (members.size() >= k) ok.push_back(w);
      if (ok.empty())
        throw Error("metatask", "no single WSI holds " + std::to_string(k) + " samples of class " + std::to_string(c));
      const auto w = ok[std::uniform_int_distribution<std::size_t>(0, ok.size() - 1)(rng)];
      return draw(by_wsi[w], k, rng);
    }

    // Heterogeneous: round-robin over shuffled WSIs, so the K shots come from
    // pairwise distinct WSIs whenever at least K are available.
    std::vector<std::vector<std::size_t>> groups;
    for (auto& [w, members] : by_wsi) groups.push_back(members);
    std::shuffle(groups.begin(), groups.end(), rng);
    for (auto& g : groups) std::shuffle(g.begin(), g.end(), rng);
    std::vector<std::size_t> out;
    for (std::size_t round = 0; out.size() < k; ++round)
      for (auto& g : groups)
        if (round < g.size() && out.size() < k) out.push_back(g[round]);
    return out;
  }

  const EmbeddingDataset& ds_;
  TaskProtocol proto_;
  std::set<ClassId> all_classes_;
  std::vector<ClassId> eligible_;
  std::map<ClassId, std::vector<std::size_t>> support_, query_;
};

inline MetaTask sample_task(const EmbeddingDataset& ds, const TaskProtocol& proto, int task_index) {
  return TaskSampler(ds, proto).sample(task_index);
}

inline std::vector<MetaTask> sample_series(const EmbeddingDataset& ds, const TaskProtocol& proto,
                                           unsigned threads = thread_count()) {
  const TaskSampler sampler(ds, proto);
  std::vector<MetaTask> tasks(static_cast<std::size_t>(proto.num_tasks));
  parallel_for(tasks.size(), [&](std::size_t i) { tasks[i] = sampler.sample(static_cast<int>(i)); }, threads);
  return tasks;
}

/// Lists every broken task invariant; an empty result means the task is valid.
inline std::vector<std::string> validate_task(const MetaTask& t, const EmbeddingDataset& ds, const TaskProtocol& proto) {
  std::vector<std::string> v;
  const auto n = static_cast<std::size_t>(ds.size());
  auto idx_str = [](std::size_t i) { return std::to_string(i); };
  if (!ds.labels) return {"dataset has no labels"};
  if (t.support_indices.size() != t.support_labels.size() || t.query_indices.size() != t.query_labels.size())
    v.push_back("index/label length mismatch");
  if (proto.selection == ShotSelection::HeteroWSI && proto.k_shot == 1)
    v.push_back("heterogeneous selection with K=1 is undefined");

  std::set<std::size_t> sup, qry;
  auto check_side = [&](const std::vector<std::size_t>& ind, const Labels& lab, std::set<std::size_t>& seen,
                        const char* side, const std::optional<std::set<std::uint32_t>>& pool) {
    for (std::size_t j = 0; j < ind.size(); ++j) {
      const auto i = ind[j];
      if (i >= n) {
        v.push_back(std::string(side) + " index out of range: " + idx_str(i));
        continue;
      }
      if (!seen.insert(i).second) v.push_back(std::string("duplicate ") + side + " index " + idx_str(i));
      if (j < lab.size() && (*ds.labels)[i] != lab[j])
        v.push_back(std::string(side) + " label mismatch at index " + idx_str(i));
      if (pool && ds.wsi_ids && !pool->count((*ds.wsi_ids)[i]))
        v.push_back(std::string(side) + " index " + idx_str(i) + " outside its WSI pool");
    }
  };
  check_side(t.support_indices, t.support_labels, sup, "support", proto.support_pool);
  check_side(t.query_indices, t.query_labels, qry, "query", proto.query_pool);
  for (auto i : sup)
    if (qry.count(i)) v.push_back("support/query overlap at index " + idx_str(i));

  // Class space.
  std::set<ClassId> tc(t.task_classes.begin(), t.task_classes.end());
  const auto all = ds.classes();
  if (proto.mode == TaskMode::GFSL) {
    if (std::vector<ClassId>(tc.begin(), tc.end()) != all) v.push_back("GFSL task classes differ from the joint label set");
  } else {
    if (tc.size() != static_cast<std::size_t>(proto.n_way))
      v.push_back("FSL task has " + std::to_string(tc.size()) + " classes, expected " + std::to_string(proto.n_way));
    if (proto.eligible_classes) {
      std::set<ClassId> e(proto.eligible_classes->begin(), proto.eligible_classes->end());
      for (auto c : tc)
        if (!e.count(c)) v.push_back("FSL task class " + std::to_string(c) + " outside the novel label set");
    }
  }

  // Cardinality per class.
  std::map<ClassId, std::vector<std::size_t>> sup_by_class;
  std::map<ClassId, int> q_count;
  for (std::size_t j = 0; j < t.support_labels.size() && j < t.support_indices.size(); ++j)
    sup_by_class[t.support_labels[j]].push_back(t.support_indices[j]);
  for (auto c : t.query_labels) ++q_count[c];
  for (auto& [c, members] : sup_by_class)
    if (!tc.count(c)) v.push_back("support label " + std::to_string(c) + " not a task class");
  for (auto& [c, cnt] : q_count)
    if (!tc.count(c)) v.push_back("query label " + std::to_string(c) + " not a task class");
  for (auto c : tc) {
    const auto ks = sup_by_class.count(c) ? sup_by_class[c].size() : 0;
    if (ks != static_cast<std::size_t>(proto.k_shot))
      v.push_back("class " + std::to_string(c) + " has " + std::to_string(ks) + " supports, expected " +
                  std::to_string(proto.k_shot));
    const int qs = q_count.count(c) ? q_count[c] : 0;
    if (qs != proto.q_query)
      v.push_back("class " + std::to_string(c) + " has " + std::to_string(qs) + " queries, expected " +
                  std::to_string(proto.q_query));
  }

  // WSI constraints.
  if (proto.selection != ShotSelection::Uniform) {
    if (!ds.wsi_ids) {
      v.push_back("WSI-constrained protocol on a dataset without wsi_ids");
      return v;
    }
    for (auto& [c, members] : sup_by_class) {
      std::set<std::uint32_t> wsis;
      for (auto i : members)
        if (i < n) wsis.insert((*ds.wsi_ids)[i]);
      if (proto.selection == ShotSelection::HomoWSI && wsis.size() > 1)
        v.push_back("homogeneous violation: class " + std::to_string(c) + " supports span " +
                    std::to_string(wsis.size()) + " WSIs");
      if (proto.selection == ShotSelection::HeteroWSI) {
        std::set<std::uint32_t> available;
        for (std::size_t i = 0; i < n; ++i)
          if ((*ds.labels)[i] == c && (!proto.support_pool || proto.support_pool->count((*ds.wsi_ids)[i])))
            available.insert((*ds.wsi_ids)[i]);
        const auto want = std::min(members.size(), available.size());
        if (wsis.size() != want)
          v.push_back("heterogeneous violation: class " + std::to_string(c) + " supports span " +
                      std::to_string(wsis.size()) + " WSIs, expected " + std::to_string(want));
      }
    }
  }
  return v;
}

// ---------------------------------------------------------------------------
// JSON lines: one task per line.

inline nlohmann::json task_to_json(const MetaTask& t) {
  return {{"task", t.task_index},
          {"classes", t.task_classes},
          {"support", t.support_indices},
          {"support_labels", t.support_labels},
          {"query", t.query_indices},
          {"query_labels", t.query_labels}};
}

inline MetaTask task_from_json(const nlohmann::json& j) {
  MetaTask t;
  t.task_index = j.at("task").get<int>();
  t.task_classes = j.at("classes").get<std::vector<ClassId>>();
  t.support_indices = j.at("support").get<std::vector<std::size_t>>();
  t.support_labels = j.at("support_labels").get<Labels>();
  t.query_indices = j.at("query").get<std::vector<std::size_t>>();
  t.query_labels = j.at("query_labels").get<Labels>();
  return t;
}

inline void write_tasks_jsonl(const std::vector<MetaTask>& tasks, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("metatask", "cannot write " + path);
  for (const auto& t : tasks) out << task_to_json(t).dump() << '\n';
}

inline std::vector<MetaTask> read_tasks_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("metatask", "cannot open " + path);
  std::vector<MetaTask> tasks;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) tasks.push_back(task_from_json(nlohmann::json::parse(line)));
  return tasks;
}

}  // namespace latentaug
