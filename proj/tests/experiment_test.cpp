#include "latentaug/experiment.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

using namespace latentaug;

namespace {

/// A small synthetic suite that runs in well under a second.
ExperimentConfig small_config() {
  ExperimentConfig c;
  c.data.synthetic.dim = 8;
  c.data.synthetic.base_classes = 3;
  c.data.synthetic.novel_classes = 1;
  c.data.synthetic.samples_per_class = 60;
  c.dictionary.prototypes = 4;
  c.augmentation.count = 10;
  c.protocol.k_shot = 2;
  c.protocol.q_query = 5;
  c.protocol.num_tasks = 12;
  return c;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(Config, JsonRoundTripAndHash) {
  auto c = small_config();
  c.protocol.novel_classes = std::vector<ClassId>{3};
  c.data.leave_out_class = 2;
  const auto back = config_from_json(config_to_json(c));
  EXPECT_EQ(config_to_json(back), config_to_json(c));
  EXPECT_EQ(config_hash(back), config_hash(c));
  // Output location is not part of the identity of a run.
  auto moved = c;
  moved.output.dir = "elsewhere";
  EXPECT_EQ(config_hash(moved), config_hash(c));
  auto other = c;
  other.master_seed = 67;
  EXPECT_NE(config_hash(other), config_hash(c));
  // A manifest reads back as its config.
  EXPECT_EQ(config_to_json(config_from_json(manifest_json(c))), config_to_json(c));
}

TEST(Config, DefaultsAndPartialFiles) {
  const auto c = config_from_json(Json::parse(R"({"protocol": {"k_shot": 1}})"));
  EXPECT_EQ(c.protocol.k_shot, 1);
  EXPECT_EQ(c.protocol.q_query, 15);
  EXPECT_EQ(c.protocol.num_tasks, 1000);
  EXPECT_EQ(c.dictionary.prototypes, 16);
  EXPECT_EQ(c.dictionary.cov_type, CovarianceType::Full);
  EXPECT_EQ(c.dictionary.kmeans_seed, 66u);
  EXPECT_EQ(c.augmentation.count, 100);
  EXPECT_EQ(c.master_seed, 66u);
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(config_from_json(Json::parse(R"({"protokol": {}})")), Error);
  EXPECT_THROW(config_from_json(Json::parse(R"({"dictionary": {"cov": "full"}})")), Error);
  EXPECT_THROW(config_from_json(Json::parse(R"({"dictionary": {"cov_type": "dense"}})")), Error);
  EXPECT_THROW(config_from_json(Json::parse(R"({"protocol": {"k_shot": "five"}})")), Error);
  auto c = small_config();
  c.classifier.kind = "svm";
  EXPECT_THROW(validate_config(c), Error);
  c = small_config();
  c.protocol.num_tasks = 1;
  EXPECT_THROW(validate_config(c), Error);
}

TEST(PrepareData, TooManyPrototypesFailsBeforeCompute) {
  auto c = small_config();
  c.dictionary.prototypes = 100000;
  try {
    prepare_data(c);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.module(), "config");
  }
}

TEST(PrepareData, SyntheticGfslSplitsBaseSamples) {
  const auto c = small_config();
  const auto p = prepare_data(c);
  EXPECT_EQ(p.novel_group, std::vector<ClassId>{3});
  EXPECT_EQ(p.eval.classes(), (std::vector<ClassId>{0, 1, 2, 3}));
  EXPECT_EQ(p.base.size() + p.eval.size(), 4 * 60);
  EXPECT_TRUE(p.base.normalized);
}

TEST(RunExperiment, ReportsAndDeterminism) {
  auto c = small_config();
  c.baseline = true;
  const auto a = run_experiment(c, 1);
  const auto b = run_experiment(c, 3);
  ASSERT_EQ(a.report.rows.size(), 2u);
  EXPECT_EQ(a.report.rows[0].method, "la");
  EXPECT_EQ(a.report.rows[1].method, "none");
  EXPECT_EQ(a.report.rows[0].names, (std::vector<std::string>{"Base", "Novel", "HarmMean"}));
  EXPECT_EQ(report_to_csv(a.report), report_to_csv(b.report));
  EXPECT_EQ(report_to_json(a.report).dump(), report_to_json(b.report).dump());
  for (const auto& run : a.runs)
    for (const auto& t : run.per_task) {
      EXPECT_LE(t[2], (t[0] + t[1]) / 2 + 1e-12);
      for (double v : t) EXPECT_TRUE(v >= 0.0 && v <= 1.0);
    }
}

TEST(RunExperiment, AllMethodsAndClassifiers) {
  for (const char* kind : {"centroid", "logistic", "ridge"})
    for (auto m : {AugmentMethod::None, AugmentMethod::LA, AugmentMethod::DC}) {
      auto c = small_config();
      c.classifier.kind = kind;
      c.augmentation.method = m;
      const auto r = run_experiment(c, 2);
      ASSERT_EQ(r.report.rows.size(), 1u);
      EXPECT_EQ(r.report.rows[0].method, to_string(m));
      EXPECT_GT(r.report.rows[0].at("HarmMean").mean, 0.0) << kind << " " << to_string(m);
    }
}

TEST(RunExperiment, FslMixtureGroups) {
  auto c = small_config();
  c.protocol.mode = TaskMode::FSL;
  c.data.synthetic.novel_classes = 3;
  c.protocol.n_way = 3;
  c.protocol.middle_classes = std::vector<ClassId>{3};
  c.protocol.out_classes = std::vector<ClassId>{4, 5};
  const auto r = run_experiment(c, 1);
  EXPECT_EQ(r.report.rows[0].names, (std::vector<std::string>{"Middle", "Out", "HarmMean"}));
  c.protocol.middle_classes.reset();
  c.protocol.out_classes.reset();
  EXPECT_EQ(run_experiment(c, 1).report.rows[0].names, std::vector<std::string>{"F1"});
}

TEST(RunExperiment, FileSourceWithLeaveOneOut) {
  SyntheticSpec spec;
  spec.dim = 6;
  spec.base_classes = 4;
  spec.novel_classes = 1;
  spec.samples_per_class = 40;
  const auto syn = generate_synthetic(spec);
  const auto dir = oracle::temp_dir("experiment");
  save_embeddings(syn.base, (dir / "joint.emb").string());
  auto c = small_config();
  c.data.source = "files";
  c.data.base_path = (dir / "joint.emb").string();
  c.data.eval_path = c.data.base_path;
  c.data.leave_out_class = 3;
  const auto p = prepare_data(c);
  EXPECT_EQ(p.base.classes(), (std::vector<ClassId>{0, 1, 2}));
  EXPECT_EQ(p.novel_group, std::vector<ClassId>{3});
  EXPECT_NO_THROW(run_experiment(c, 1));
}

TEST(Outputs, WrittenFilesAndSixDigits) {
  auto c = small_config();
  c.output.write_tasks = true;
  const auto r = run_experiment(c, 1);
  const auto dir = oracle::temp_dir("experiment") / "out";
  write_experiment_outputs(r, c, dir);
  for (const char* f : {"report.csv", "report.json", "manifest.json", "task_scores.csv", "tasks.jsonl"})
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  const auto csv = slurp(dir / "report.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "method,setting,num_tasks,Base,Base_ci95,Novel,Novel_ci95,HarmMean,HarmMean_ci95");
  EXPECT_EQ(fmt6(2.0 / 3.0), "0.666667");
  EXPECT_EQ(fmt6(1234567.0), "1.23457e+06");
  EXPECT_EQ(read_tasks_jsonl((dir / "tasks.jsonl").string()), r.tasks);
  // Replaying from the manifest reproduces the reports.
  const auto replay = load_config((dir / "manifest.json").string());
  const auto again = run_experiment(replay, 2);
  EXPECT_EQ(report_to_csv(again.report), csv);
}

TEST(Sweep, SharedSeriesAndSingleValueMatchesRun) {
  auto c = small_config();
  c.baseline = true;
  const auto sweep = run_ablation_sweep(c, SweepAxis::Prototypes, {"2", "4"}, 2);
  ASSERT_EQ(sweep.rows.size(), 2u);
  ASSERT_TRUE(sweep.baseline.has_value());
  const auto single = run_ablation_sweep(c, SweepAxis::Prototypes, {"4"}, 2);
  const auto direct = run_experiment(c, 2);
  EXPECT_EQ(report_to_csv({"", {single.rows[0]}, {}}), report_to_csv({"", {direct.report.rows[0]}, {}}));
  EXPECT_EQ(report_to_csv({"", {*single.baseline}, {}}), report_to_csv({"", {direct.report.rows[1]}, {}}));
  const auto csv = sweep_to_csv(sweep);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 3 * 3);
  EXPECT_THROW(run_ablation_sweep(c, SweepAxis::CovType, {"dense"}, 1), Error);
  EXPECT_THROW(run_ablation_sweep(c, SweepAxis::AugCount, {"x"}, 1), Error);
  EXPECT_THROW(parse_sweep_axis("lr"), Error);
}

TEST(Errors, CarryModuleAndTaskIndex) {
  auto c = small_config();
  c.augmentation.method = AugmentMethod::DC;
  c.augmentation.dc_k = 50;  // more than the base classes
  try {
    run_experiment(c, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.module(), "dictionary");
    EXPECT_NE(std::string(e.what()).find("task 0"), std::string::npos);
  }
}
