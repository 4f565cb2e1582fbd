#include "latentaug/metatask.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

using namespace latentaug;

namespace {

/// Labeled dataset with `classes` classes, `per_class` samples each and WSI
/// ids cycling through `wsis` slides.
EmbeddingDataset labeled(int classes, int per_class, int wsis = 0) {
  EmbeddingDataset ds;
  ds.features = FeatureMatrix::Zero(classes * per_class, 2);
  ds.labels.emplace();
  if (wsis > 0) ds.wsi_ids.emplace();
  for (int c = 0; c < classes; ++c)
    for (int i = 0; i < per_class; ++i) {
      ds.features(c * per_class + i, 0) = static_cast<float>(c);
      ds.features(c * per_class + i, 1) = static_cast<float>(i);
      ds.labels->push_back(static_cast<ClassId>(c));
      if (wsis > 0) ds.wsi_ids->push_back(static_cast<std::uint32_t>((i + c) % wsis));
    }
  return ds;
}

}  // namespace

TEST(SampleTask, FiveWayOneShot) {
  const auto ds = labeled(5, 40);
  TaskProtocol p;
  p.mode = TaskMode::FSL;
  p.n_way = 5;
  p.k_shot = 1;
  p.q_query = 15;
  const auto t = sample_task(ds, p, 0);
  EXPECT_EQ(t.support_indices.size(), 5u);
  EXPECT_EQ(t.query_indices.size(), 75u);
  std::set<std::size_t> s(t.support_indices.begin(), t.support_indices.end());
  for (auto i : t.query_indices) EXPECT_FALSE(s.count(i));
  EXPECT_TRUE(validate_task(t, ds, p).empty());
}

TEST(SampleTask, GfslSpansAllClasses) {
  const auto ds = labeled(9, 30);
  TaskProtocol p;
  p.mode = TaskMode::GFSL;
  p.k_shot = 1;
  const auto t = sample_task(ds, p, 3);
  EXPECT_EQ(t.support_indices.size(), 9u);
  EXPECT_EQ(std::set<ClassId>(t.support_labels.begin(), t.support_labels.end()).size(), 9u);
  EXPECT_EQ(t.task_classes, ds.classes());
  EXPECT_EQ(t.query_indices.size(), 135u);
}

TEST(SampleTask, DeterministicAndOrderIndependent) {
  const auto ds = labeled(6, 40, 4);
  TaskProtocol p;
  p.mode = TaskMode::FSL;
  p.n_way = 3;
  p.num_tasks = 64;
  p.master_seed = 123;
  EXPECT_EQ(sample_task(ds, p, 17), sample_task(ds, p, 17));
  EXPECT_NE(sample_task(ds, p, 17), sample_task(ds, p, 18));
  const auto seq = sample_series(ds, p, 1);
  const auto par = sample_series(ds, p, 4);
  EXPECT_EQ(seq, par);
  // Generating in shuffled order gives the same tasks.
  std::vector<int> order(64);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), Rng(9));
  for (int i : order) EXPECT_EQ(sample_task(ds, p, i), seq[static_cast<std::size_t>(i)]);
  p.num_tasks = 1;
  EXPECT_EQ(sample_series(ds, p).size(), 1u);
}

TEST(SampleTask, FslLabelPurity) {
  const auto ds = labeled(9, 30);
  TaskProtocol p;
  p.mode = TaskMode::FSL;
  p.n_way = 2;
  p.eligible_classes = std::vector<ClassId>{7, 8};
  p.num_tasks = 50;
  for (const auto& t : sample_series(ds, p)) {
    for (auto c : t.support_labels) EXPECT_GE(c, 7u);
    for (auto c : t.query_labels) EXPECT_GE(c, 7u);
    EXPECT_TRUE(validate_task(t, ds, p).empty());
  }
}

TEST(SampleTask, WsiModesHoldAcrossSeries) {
  const auto ds = labeled(4, 60, 6);
  for (auto sel : {ShotSelection::HeteroWSI, ShotSelection::HomoWSI}) {
    TaskProtocol p;
    p.mode = TaskMode::GFSL;
    p.k_shot = 5;
    p.selection = sel;
    p.num_tasks = 200;
    for (const auto& t : sample_series(ds, p)) {
      const auto v = validate_task(t, ds, p);
      EXPECT_TRUE(v.empty()) << to_string(sel) << ": " << (v.empty() ? "" : v.front());
    }
  }
}

TEST(SampleTask, HeteroFallsBackToMaximallyDistinct) {
  const auto ds = labeled(2, 30, 3);  // only 3 WSIs per class, K=5
  TaskProtocol p;
  p.mode = TaskMode::GFSL;
  p.k_shot = 5;
  p.selection = ShotSelection::HeteroWSI;
  const auto t = sample_task(ds, p, 0);
  EXPECT_TRUE(validate_task(t, ds, p).empty());
  std::set<std::uint32_t> w;
  for (std::size_t j = 0; j < 5; ++j) w.insert((*ds.wsi_ids)[t.support_indices[j]]);
  EXPECT_EQ(w.size(), 3u);
}

TEST(SampleTask, OutDomainPools) {
  const auto ds = labeled(3, 60, 6);
  TaskProtocol p;
  p.mode = TaskMode::GFSL;
  p.selection = ShotSelection::HeteroWSI;
  p.support_pool = std::set<std::uint32_t>{0, 1, 2};
  p.query_pool = std::set<std::uint32_t>{3, 4, 5};
  p.num_tasks = 30;
  for (const auto& t : sample_series(ds, p)) {
    EXPECT_TRUE(validate_task(t, ds, p).empty());
    for (auto i : t.support_indices) EXPECT_LT((*ds.wsi_ids)[i], 3u);
    for (auto i : t.query_indices) EXPECT_GE((*ds.wsi_ids)[i], 3u);
  }
  p.query_pool = std::set<std::uint32_t>{2, 3};
  EXPECT_THROW(sample_task(ds, p, 0), Error);
}

TEST(SampleTask, Errors) {
  const auto ds = labeled(3, 10, 5);
  TaskProtocol p;
  p.mode = TaskMode::FSL;
  p.n_way = 3;
  p.k_shot = 1;
  p.selection = ShotSelection::HeteroWSI;
  EXPECT_THROW(sample_task(ds, p, 0), Error);  // undefined for K=1
  p.selection = ShotSelection::Uniform;
  p.k_shot = 5;
  p.q_query = 15;
  EXPECT_THROW(sample_task(ds, p, 0), Error);  // 10 < K + Q
  p.q_query = 2;
  p.n_way = 4;
  EXPECT_THROW(sample_task(ds, p, 0), Error);
  p.n_way = 3;
  p.selection = ShotSelection::HomoWSI;  // each WSI holds 2 samples per class
  EXPECT_THROW(sample_task(ds, p, 0), Error);
  p.selection = ShotSelection::Uniform;
  auto unlabeled = ds;
  unlabeled.labels.reset();
  EXPECT_THROW(sample_task(unlabeled, p, 0), Error);
}

TEST(ValidateTask, ReportsViolations) {
  const auto ds = labeled(3, 20, 4);
  TaskProtocol p;
  p.mode = TaskMode::GFSL;
  p.k_shot = 2;
  p.q_query = 3;
  auto t = sample_task(ds, p, 0);
  EXPECT_TRUE(validate_task(t, ds, p).empty());

  auto overlap = t;
  overlap.query_indices[0] = overlap.support_indices[0];
  overlap.query_labels[0] = overlap.support_labels[0];
  const auto v = validate_task(overlap, ds, p);
  ASSERT_FALSE(v.empty());
  EXPECT_TRUE(std::any_of(v.begin(), v.end(), [](auto& s) { return s.rfind("support/query overlap at", 0) == 0; }));

  p.selection = ShotSelection::HomoWSI;
  auto homo = sample_task(ds, p, 1);
  EXPECT_TRUE(validate_task(homo, ds, p).empty());
  // Swap in a same-class sample from another WSI.
  const auto first = homo.support_indices[0];
  for (std::size_t i = 0; i < static_cast<std::size_t>(ds.size()); ++i)
    if ((*ds.labels)[i] == (*ds.labels)[first] && (*ds.wsi_ids)[i] != (*ds.wsi_ids)[first] &&
        std::find(homo.query_indices.begin(), homo.query_indices.end(), i) == homo.query_indices.end()) {
      homo.support_indices[1] = i;
      break;
    }
  const auto hv = validate_task(homo, ds, p);
  EXPECT_TRUE(std::any_of(hv.begin(), hv.end(), [](auto& s) { return s.rfind("homogeneous violation", 0) == 0; }));

  auto short_task = t;
  short_task.query_indices.pop_back();
  short_task.query_labels.pop_back();
  p.selection = ShotSelection::Uniform;
  EXPECT_FALSE(validate_task(short_task, ds, p).empty());
}

TEST(TaskJsonl, RoundTrip) {
  const auto ds = labeled(4, 30);
  TaskProtocol p;
  p.mode = TaskMode::FSL;
  p.n_way = 2;
  p.num_tasks = 5;
  const auto tasks = sample_series(ds, p);
  const auto path = (oracle::temp_dir("metatask") / "tasks.jsonl").string();
  write_tasks_jsonl(tasks, path);
  EXPECT_EQ(read_tasks_jsonl(path), tasks);
}

TEST(Names, ParseRoundTrip) {
  for (auto m : {TaskMode::FSL, TaskMode::GFSL}) EXPECT_EQ(parse_task_mode(to_string(m)), m);
  for (auto s : {ShotSelection::Uniform, ShotSelection::HeteroWSI, ShotSelection::HomoWSI})
    EXPECT_EQ(parse_shot_selection(to_string(s)), s);
  EXPECT_THROW(parse_task_mode("zsl"), Error);
}
