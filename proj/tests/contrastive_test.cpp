#include "latentaug/contrastive.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

using namespace latentaug;

namespace {

Vector unit(Rng& rng, Eigen::Index d) { return standard_normal(d, rng).normalized(); }

std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

}  // namespace

TEST(InfoNce, SymmetricLogitsGiveLogTwo) {
  Vector u(2), v(2);
  u << 1, 0;
  v << 0.3, 0.9;
  EXPECT_NEAR(infonce(u, v, Matrix(v.transpose()), 1.0), std::log(2.0), 1e-15);
}

TEST(InfoNce, DominantPositiveApproachesZero) {
  Vector u = Vector::Unit(3, 0);
  Matrix negs(1, 3);
  negs << -1, 0, 0;
  EXPECT_LT(infonce(u, Vector(100.0 * u), negs, 1.0), 1e-40);
  EXPECT_GE(infonce(u, Vector(100.0 * u), negs, 1.0), 0.0);
}

TEST(InfoNce, MatchesLongDoubleOracle) {
  Rng rng(3);
  for (int trial = 0; trial < 500; ++trial) {
    const Vector u = unit(rng, 8), pos = unit(rng, 8);
    Matrix negs(7, 8);
    oracle::Rows neg_rows;
    for (int j = 0; j < 7; ++j) {
      negs.row(j) = unit(rng, 8).transpose();
      neg_rows.push_back(to_std(negs.row(j).transpose()));
    }
    const double got = infonce(u, pos, negs, 0.5);
    const long double want = oracle::infonce(to_std(u), to_std(pos), neg_rows, 0.5);
    EXPECT_NEAR(got, static_cast<double>(want), 1e-10);
  }
}

TEST(InfoNce, MonotoneInSimilarities) {
  Rng rng(4);
  const Vector u = unit(rng, 4);
  Matrix negs(3, 4);
  for (int j = 0; j < 3; ++j) negs.row(j) = unit(rng, 4).transpose();
  const Vector pos = unit(rng, 4);
  const double base = infonce(u, pos, negs, 1.0);
  EXPECT_LT(infonce(u, Vector(pos + 0.1 * u), negs, 1.0), base);
  Matrix closer = negs;
  closer.row(1) += 0.1 * u.transpose();
  EXPECT_GT(infonce(u, pos, closer, 1.0), base);
}

TEST(InfoNce, StableForHugeLogits) {
  Vector u = Vector::Unit(2, 0);
  Matrix negs(2, 2);
  negs << 1, 0, -1, 0;
  const double l = infonce(u, Vector(Vector::Unit(2, 0)), negs, 1e-4);  // logits of +-1e4
  EXPECT_TRUE(std::isfinite(l));
  EXPECT_NEAR(l, std::log(2.0), 1e-12);
  EXPECT_THROW(infonce(u, u, negs, 0.0), Error);
  EXPECT_THROW(infonce(u, u, Matrix(0, 2), 1.0), Error);
}

TEST(SymmetricLoss, OrthonormalClosedForm) {
  ViewBatch b;
  b.z1 = Matrix::Identity(2, 2);
  b.z2 = b.z1;
  b.temperature = 1.0;
  const double per_row = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
  EXPECT_NEAR(directional_contrastive_loss(b.z1, b.z2, 1.0), per_row, 1e-15);
  EXPECT_NEAR(symmetric_clp_loss(b), per_row, 1e-15);
}

TEST(SymmetricLoss, PermutationAndSwapInvariance) {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    ViewBatch b;
    b.z1.resize(6, 5);
    b.z2.resize(6, 5);
    for (int i = 0; i < 6; ++i) b.z1.row(i) = unit(rng, 5).transpose(), b.z2.row(i) = unit(rng, 5).transpose();
    b.temperature = 0.3;
    const double loss = symmetric_clp_loss(b);
    EXPECT_GE(loss, 0.0);

    ViewBatch swapped{b.z2, b.z1, b.temperature};
    EXPECT_NEAR(symmetric_clp_loss(swapped), loss, 1e-12);

    Eigen::PermutationMatrix<Eigen::Dynamic> perm(6);
    perm.setIdentity();
    std::shuffle(perm.indices().data(), perm.indices().data() + 6, rng);
    ViewBatch permuted{perm * b.z1, perm * b.z2, b.temperature};
    EXPECT_NEAR(symmetric_clp_loss(permuted), loss, 1e-12);
  }
}

TEST(SymmetricLoss, Validation) {
  ViewBatch b{Matrix::Identity(1, 3), Matrix::Identity(1, 3), 1.0};
  EXPECT_THROW(symmetric_clp_loss(b), Error);
  b = ViewBatch{Matrix::Identity(2, 3), 2.0 * Matrix::Identity(2, 3), 1.0};
  EXPECT_THROW(symmetric_clp_loss(b), Error);
  b = ViewBatch{Matrix::Identity(2, 3), Matrix::Identity(3, 3), 1.0};
  EXPECT_THROW(symmetric_clp_loss(b), Error);
}

TEST(Momentum, Values) {
  Vector one = Vector::Ones(1), zero = Vector::Zero(1);
  EXPECT_EQ(momentum_update(one, zero, 0.996)(0), 0.996);
  Vector t(3), o(3);
  t << 1, 2, 3;
  o << -1, 5, 0.5;
  EXPECT_EQ(momentum_update(t, o, 1.0), t);
  EXPECT_EQ(momentum_update(t, o, 0.0), o);
  EXPECT_THROW(momentum_update(t, o, 1.5), Error);
  EXPECT_THROW(momentum_update(t, Vector::Zero(2), 0.5), Error);
}
