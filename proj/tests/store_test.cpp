#include "latentaug/store.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <iterator>

using namespace latentaug;

namespace {

EmbeddingDataset make_ds(std::initializer_list<std::initializer_list<float>> rows) {
  EmbeddingDataset ds;
  ds.features.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.begin()->size()));
  Eigen::Index i = 0;
  for (auto r : rows) {
    Eigen::Index j = 0;
    for (float v : r) ds.features(i, j++) = v;
    ++i;
  }
  return ds;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

}  // namespace

TEST(Store, BinaryRoundTripTwoByThree) {
  auto ds = make_ds({{1, 0, 0}, {0, 1, 0}});
  ds.labels = Labels{0, 1};
  const auto path = oracle::temp_dir("store") / "two.emb";
  save_embeddings(ds, path.string());
  const auto back = load_embeddings(path.string());
  EXPECT_EQ(back.size(), 2);
  EXPECT_EQ(back.dim(), 3);
  EXPECT_EQ(back, ds);
  EXPECT_FALSE(back.wsi_ids.has_value());
}

TEST(Store, BinaryLayoutMatchesFormat) {
  auto ds = make_ds({{1.5f, -2.0f}});
  ds.labels = Labels{7};
  ds.wsi_ids = std::vector<std::uint32_t>{3};
  const auto path = oracle::temp_dir("store") / "layout.emb";
  save_embeddings(ds, path.string());
  const auto bytes = slurp(path);
  ASSERT_EQ(bytes.size(), 13u + 8u + 4u + 4u);
  EXPECT_EQ(bytes.substr(0, 4), "EMB1");
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 0b011);
  EXPECT_EQ(static_cast<unsigned char>(bytes[5]), 1);  // N little-endian
  EXPECT_EQ(static_cast<unsigned char>(bytes[9]), 2);  // d little-endian
  float first;
  std::memcpy(&first, bytes.data() + 13, 4);
  EXPECT_EQ(first, 1.5f);
  EXPECT_EQ(static_cast<unsigned char>(bytes[21]), 7);
  EXPECT_EQ(static_cast<unsigned char>(bytes[25]), 3);
}

TEST(Store, RoundTripPreservesAbsenceAndWsi) {
  auto ds = make_ds({{0.6f, 0.8f}, {1, 0}, {0, 1}});
  ds.normalized = true;
  const auto dir = oracle::temp_dir("store");
  save_embeddings(ds, (dir / "nolabels.emb").string());
  const auto bytes = slurp(dir / "nolabels.emb");
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 0b100);
  auto back = load_embeddings((dir / "nolabels.emb").string());
  EXPECT_FALSE(back.labels.has_value());
  EXPECT_TRUE(back.normalized);
  EXPECT_EQ(back, ds);

  ds.wsi_ids = std::vector<std::uint32_t>{4000000000u, 0, 17};
  save_embeddings(ds, (dir / "wsi.emb").string());
  back = load_embeddings((dir / "wsi.emb").string());
  EXPECT_EQ(back.wsi_ids, ds.wsi_ids);
}

TEST(Store, RoundTripIsByteIdenticalOnRandomData) {
  // save -> load -> save must reproduce the file byte for byte.
  const auto dir = oracle::temp_dir("store");
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    SyntheticSpec spec;
    spec.dim = 5;
    spec.samples_per_class = 7;
    spec.wsi_count = 3;
    spec.seed = seed;
    const auto syn = generate_synthetic(spec);
    const auto a = dir / ("rt_a_" + std::to_string(seed) + ".emb");
    const auto b = dir / ("rt_b_" + std::to_string(seed) + ".emb");
    save_embeddings(syn.base, a.string());
    const auto loaded = load_embeddings(a.string());
    EXPECT_EQ(loaded, syn.base);
    save_embeddings(loaded, b.string());
    EXPECT_EQ(slurp(a), slurp(b));
  }
}

TEST(Store, BadMagicAndSizeMismatch) {
  const auto dir = oracle::temp_dir("store");
  write_file(dir / "magic.emb", std::string("EMB2") + std::string(9, '\0'));
  try {
    load_embeddings((dir / "magic.emb").string());
    FAIL() << "expected bad magic";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("bad magic"), std::string::npos);
  }
  auto ds = make_ds({{1, 2}, {3, 4}});
  save_embeddings(ds, (dir / "trunc.emb").string());
  auto bytes = slurp(dir / "trunc.emb");
  write_file(dir / "trunc.emb", bytes.substr(0, bytes.size() - 4));
  EXPECT_THROW(load_embeddings((dir / "trunc.emb").string()), Error);
}

TEST(Store, RejectsNonFinite) {
  auto ds = make_ds({{1, 2}});
  ds.features(0, 1) = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(save_embeddings(ds, (oracle::temp_dir("store") / "nan.emb").string()), Error);
  const auto path = oracle::temp_dir("store") / "inf.csv";
  write_file(path, "f0,f1\n1,inf\n");
  EXPECT_THROW(load_embeddings(path.string(), FileFormat::Csv), Error);
}

TEST(Store, CsvWithLabels) {
  const auto path = oracle::temp_dir("store") / "small.csv";
  write_file(path, "f0,f1,label\n1,0,0\n0,1,1\n");
  const auto ds = load_embeddings(path.string(), FileFormat::Csv);
  EXPECT_EQ(ds.size(), 2);
  EXPECT_EQ(ds.dim(), 2);
  EXPECT_EQ(ds.labels, (Labels{0, 1}));
  EXPECT_FALSE(ds.normalized);
  EXPECT_FALSE(ds.wsi_ids.has_value());
}

TEST(Store, CsvRoundTripAndMalformedHeader) {
  const auto dir = oracle::temp_dir("store");
  auto ds = make_ds({{0.1f, -3.25e-7f, 12345.678f}, {1, 2, 3}});
  ds.labels = Labels{5, 6};
  ds.wsi_ids = std::vector<std::uint32_t>{9, 8};
  save_embeddings_csv(ds, (dir / "rt.csv").string());
  EXPECT_EQ(load_embeddings_auto((dir / "rt.csv").string()), ds);

  write_file(dir / "bad.csv", "x,y\n1,2\n");
  EXPECT_THROW(load_embeddings((dir / "bad.csv").string(), FileFormat::Csv), Error);
  write_file(dir / "ragged.csv", "f0,f1\n1,2\n3\n");
  EXPECT_THROW(load_embeddings((dir / "ragged.csv").string(), FileFormat::Csv), Error);
}

TEST(Store, L2Normalize) {
  const auto ds = make_ds({{3, 4}, {1, 0}});
  const auto n = l2_normalize(ds);
  EXPECT_TRUE(n.normalized);
  EXPECT_FLOAT_EQ(n.features(0, 0), 0.6f);
  EXPECT_FLOAT_EQ(n.features(0, 1), 0.8f);
  EXPECT_EQ(n.features(1, 0), 1.0f);
  EXPECT_EQ(n.features(1, 1), 0.0f);
}

TEST(Store, L2NormalizeIdempotentProperty) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    SyntheticSpec spec;
    spec.dim = 1 + static_cast<int>(seed % 9);
    spec.samples_per_class = 5;
    spec.seed = seed;
    const auto once = l2_normalize(generate_synthetic(spec).base);
    const auto twice = l2_normalize(once);
    for (Eigen::Index i = 0; i < once.size(); ++i) {
      EXPECT_NEAR(once.row(i).norm(), 1.0, 1e-5);
      EXPECT_LE((once.row(i) - twice.row(i)).cwiseAbs().maxCoeff(), 1e-6);
    }
  }
}

TEST(Store, ZeroRowNamesIndex) {
  const auto ds = make_ds({{1, 1}, {0, 0}});
  try {
    l2_normalize(ds);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("row 1"), std::string::npos);
  }
}

TEST(Store, LeaveOneClassOutNineClasses) {
  SyntheticSpec spec;
  spec.dim = 4;
  spec.base_classes = 9;
  spec.novel_classes = 1;
  spec.samples_per_class = 6;
  const auto ds = generate_synthetic(spec).base;
  const auto split = leave_one_class_out(ds, 7);
  const auto classes = split.base.classes();
  EXPECT_EQ(classes.size(), 8u);
  EXPECT_EQ(std::count(classes.begin(), classes.end(), 7u), 0);
  EXPECT_EQ(split.joint, ds);
  const auto removed = std::count(ds.labels->begin(), ds.labels->end(), 7u);
  EXPECT_EQ(split.base.size() + removed, ds.size());
}

TEST(Store, LeaveOneClassOutErrors) {
  auto ds = make_ds({{1, 0}, {0, 1}});
  ds.labels = Labels{3, 3};
  try {
    leave_one_class_out(ds, 3);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("empty base"), std::string::npos);
  }
  EXPECT_THROW(leave_one_class_out(ds, 4), Error);
}

TEST(Store, SyntheticDeterministic) {
  SyntheticSpec spec;
  spec.seed = 1;
  spec.samples_per_class = 20;
  spec.wsi_count = 4;
  const auto a = generate_synthetic(spec);
  const auto b = generate_synthetic(spec);
  EXPECT_EQ(a.base, b.base);
  EXPECT_EQ(a.novel, b.novel);
  spec.seed = 2;
  EXPECT_FALSE(generate_synthetic(spec).base == a.base);
}

TEST(Store, SyntheticZeroCovarianceCollapsesToMeans) {
  SyntheticSpec spec;
  spec.dim = 6;
  spec.covariance_scale = 0.0;
  spec.clusters_per_class = 3;
  spec.samples_per_class = 12;
  spec.wsi_count = 2;
  const auto syn = generate_synthetic(spec);
  for (const auto* ds : {&syn.base, &syn.novel}) {
    std::map<std::vector<float>, int> distinct;
    for (Eigen::Index i = 0; i < ds->size(); ++i) {
      std::vector<float> r(ds->features.row(i).data(), ds->features.row(i).data() + ds->dim());
      ++distinct[r];
    }
    // Every sample sits on one of its class's cluster means.
    const auto classes = ds->classes().size();
    EXPECT_EQ(distinct.size(), classes * 3);
    for (auto& [row, count] : distinct) EXPECT_EQ(count, 4);
  }
}

TEST(Store, SyntheticSharedVariationCopiesBaseCovariances) {
  SyntheticSpec spec;
  spec.dim = 16;
  spec.base_classes = 7;
  spec.novel_classes = 2;
  spec.shared_variation = true;
  spec.samples_per_class = 10;
  const auto syn = generate_synthetic(spec);
  const auto& t = syn.truth;
  const std::size_t base_clusters = 7u * static_cast<std::size_t>(spec.clusters_per_class);
  ASSERT_EQ(t.cluster_covariances.size(), 9u * static_cast<std::size_t>(spec.clusters_per_class));
  for (std::size_t k = base_clusters; k < t.cluster_covariances.size(); ++k) {
    bool matched = false;
    for (std::size_t b = 0; b < base_clusters; ++b)
      matched = matched || (t.cluster_covariances[k].array() == t.cluster_covariances[b].array()).all();
    EXPECT_TRUE(matched) << "novel cluster " << k;
    EXPECT_GE(t.covariance_source[k], 0);
  }
  // Labels partition into disjoint base and novel sets.
  for (auto c : syn.base.classes()) EXPECT_LT(c, 7u);
  for (auto c : syn.novel.classes()) EXPECT_GE(c, 7u);
}

TEST(Store, SyntheticWithoutSharingHasOwnCovariances) {
  SyntheticSpec spec;
  spec.dim = 8;
  spec.shared_variation = false;
  spec.samples_per_class = 4;
  const auto syn = generate_synthetic(spec);
  for (int src : syn.truth.covariance_source) EXPECT_EQ(src, -1);
}

TEST(Store, SplitPerClassPartitions) {
  SyntheticSpec spec;
  spec.dim = 3;
  spec.samples_per_class = 11;
  const auto ds = generate_synthetic(spec).base;
  const auto [a, b] = split_per_class(ds, 0.5, 9);
  EXPECT_EQ(a.size() + b.size(), ds.size());
  EXPECT_EQ(a.classes(), ds.classes());
  EXPECT_EQ(b.classes(), ds.classes());
}
