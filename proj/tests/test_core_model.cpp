#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace cgcd;

namespace {

ModelState two_head_model(Eigen::Index d = 2) {
  ModelState m;
  m.adapter_w = Matrix::Identity(d, d);
  m.adapter_b = Vector::Zero(d);
  m.projection = Matrix::Identity(d, d);
  m.heads = Matrix::Zero(2, d);
  m.heads(0, 0) = 1.0;
  m.heads(1, 1) = 1.0;
  return m;
}

}  // namespace

TEST(LabelSpace, StageProgression) {
  const LabelSpace s0 = LabelSpace::initial(20);
  EXPECT_EQ(s0.k(), 20);
  EXPECT_EQ(s0.k_new, 0);
  const LabelSpace s1 = s0.next(4);
  EXPECT_EQ(s1.stage, 1);
  EXPECT_EQ(s1.k_old, 20);
  EXPECT_EQ(s1.k(), 24);
  EXPECT_TRUE(s1.is_old(19));
  EXPECT_TRUE(s1.is_new(20));
  EXPECT_FALSE(s1.is_new(24));
  EXPECT_EQ(s1.next(4).k_old, s1.k());
  EXPECT_THROW(s1.next(0), ConfigError);
}

TEST(HyperParams, DefaultsAndValidation) {
  HyperParams hp;
  EXPECT_DOUBLE_EQ(hp.tau_p, 0.1);
  EXPECT_DOUBLE_EQ(hp.tau_t, 0.05);
  EXPECT_DOUBLE_EQ(hp.tau_h, 0.1);
  EXPECT_DOUBLE_EQ(hp.lambda0, 0.35);
  EXPECT_DOUBLE_EQ(hp.lr_init, 0.1);
  EXPECT_DOUBLE_EQ(hp.lr_cont, 0.01);
  EXPECT_EQ(hp.epochs_init, 100);
  EXPECT_EQ(hp.epochs_cont, 30);
  EXPECT_EQ(hp.batch_size, 128);
  EXPECT_NO_THROW(hp.validate());
  hp.tau_t = 0.2;
  EXPECT_THROW(hp.validate(), ConfigError);
  hp = HyperParams{};
  hp.tau_h = 0.0;
  EXPECT_THROW(hp.validate(), ConfigError);
}

TEST(Adapt, IdentityMapsBasisVector) {
  const ModelState m = two_head_model(4);
  Vector e1 = Vector::Zero(4);
  e1(0) = 1.0;
  EXPECT_TRUE(adapt(m, e1).isApprox(e1));
}

TEST(Adapt, IdentityMapsAnyUnitVector) {
  Rng rng(3);
  const ModelState m = two_head_model(6);
  for (int i = 0; i < 10; ++i) {
    const Vector u = random_unit(6, rng);
    EXPECT_LT((adapt(m, u) - u).norm(), 1e-15);
  }
}

TEST(Adapt, MatchesDirectEvaluation) {
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    ModelState m = oracle::random_model(5, 3, 2, rng);
    const Vector u = random_unit(5, rng);
    Vector expect(5);
    for (int r = 0; r < 5; ++r) {
      double s = m.adapter_b(r);
      for (int c = 0; c < 5; ++c) s += m.adapter_w(r, c) * u(c);
      expect(r) = s;
    }
    expect /= expect.norm();
    EXPECT_LT((adapt(m, u) - expect).norm(), 1e-14);
    EXPECT_NEAR(adapt(m, u).norm(), 1.0, 1e-14);
  }
}

TEST(Adapt, ZeroPreActivationIsAnError) {
  ModelState m = two_head_model(3);
  m.adapter_w.setZero();
  Vector u = Vector::Zero(3);
  u(0) = 1.0;
  try {
    adapt(m, u);
    FAIL() << "expected an error";
  } catch (const RuntimeError& e) {
    EXPECT_STREQ(e.what(), "degenerate adapter output");
  }
  EXPECT_THROW(adapt_batch(m, u.transpose()), RuntimeError);
}

TEST(Classify, EquidistantIsUniform) {
  const ModelState m = two_head_model(2);
  const Vector z = Vector::Constant(2, 1.0 / std::sqrt(2.0));
  const Vector p = classify(m, z, 0.1);
  EXPECT_NEAR(p(0), 0.5, 1e-12);
  EXPECT_NEAR(p(1), 0.5, 1e-12);
}

TEST(Classify, AnalyticSoftmax) {
  const ModelState m = two_head_model(2);
  Vector z = Vector::Zero(2);
  z(0) = 1.0;
  const Vector p1 = classify(m, z, 1.0);
  EXPECT_NEAR(p1(0), 0.7310585786300049, 1e-12);
  EXPECT_NEAR(p1(1), 0.2689414213699951, 1e-12);
  const Vector p01 = classify(m, z, 0.1);
  const double e10 = std::exp(10.0);
  EXPECT_NEAR(p01(0), e10 / (e10 + 1.0), 1e-12);
  EXPECT_NEAR(p01(1), 1.0 / (e10 + 1.0), 1e-15);
  EXPECT_NEAR(p01(0), 0.9999546, 1e-7);
}

TEST(Classify, NoHeadsOrBadTemperatureIsAnError) {
  ModelState m = two_head_model(2);
  Vector z = Vector::Zero(2);
  z(0) = 1.0;
  EXPECT_THROW(classify(m, z, 0.0), RuntimeError);
  m.heads.resize(0, 2);
  EXPECT_THROW(classify(m, z, 0.1), RuntimeError);
}

TEST(Classify, ProbabilitiesPositiveAndSumToOne) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const ModelState m = oracle::random_model(8, 4, 6, rng);
    const Vector p = classify(m, random_unit(8, rng), 0.1);
    EXPECT_NEAR(p.sum(), 1.0, 1e-9);
    EXPECT_GT(p.minCoeff(), 0.0);
  }
}

TEST(Classify, InvariantToHeadRescaling) {
  Rng rng(6);
  ModelState m = oracle::random_model(8, 4, 5, rng);
  const Vector z = random_unit(8, rng);
  const Vector before = classify(m, z, 0.1);
  m.heads.row(2) *= 7.5;
  m.heads.row(4) *= 0.01;
  const Vector after = classify(m, z, 0.1);
  EXPECT_LT((before - after).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(Project, IdentityAndUnitNorm) {
  Rng rng(7);
  const ModelState m = two_head_model(5);
  const Vector z = random_unit(5, rng);
  EXPECT_LT((project(m, z) - z).norm(), 1e-15);
  for (int trial = 0; trial < 10; ++trial) {
    const ModelState r = oracle::random_model(5, 7, 2, rng);
    const Vector h = project(r, random_unit(5, rng));
    EXPECT_NEAR(h.norm(), 1.0, 1e-14);
  }
}

TEST(Project, MatchesDirectEvaluation) {
  Rng rng(8);
  const ModelState m = oracle::random_model(4, 3, 2, rng);
  const Vector z = random_unit(4, rng);
  Vector expect = Vector::Zero(3);
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 4; ++c) expect(r) += m.projection(r, c) * z(c);
  }
  expect /= expect.norm();
  EXPECT_LT((project(m, z) - expect).norm(), 1e-14);
  ModelState zero = m;
  zero.projection.setZero();
  EXPECT_THROW(project(zero, z), RuntimeError);
}

TEST(ModelState, InitialHasIdentityAdapterAndUnitHeads) {
  Rng rng(9);
  const ModelState m = ModelState::initial(6, 10, 4, rng);
  EXPECT_TRUE(m.adapter_w.isIdentity());
  EXPECT_TRUE(m.adapter_b.isZero());
  EXPECT_EQ(m.projection.rows(), 10);
  EXPECT_EQ(m.heads.rows(), 4);
  for (Eigen::Index i = 0; i < 4; ++i) EXPECT_NEAR(m.heads.row(i).norm(), 1.0, 1e-14);
}

TEST(ModelState, FlattenRoundTrip) {
  Rng rng(10);
  const ModelState m = oracle::random_model(5, 3, 4, rng);
  const Vector flat = flatten(m);
  EXPECT_EQ(flat.size(), parameter_count(m));
  const ModelState back = unflatten(flat, m);
  EXPECT_EQ(back.adapter_w, m.adapter_w);
  EXPECT_EQ(back.adapter_b, m.adapter_b);
  EXPECT_EQ(back.projection, m.projection);
  EXPECT_EQ(back.heads, m.heads);
}

TEST(Batch, ArgmaxTiesGoToLowestIndex) {
  Matrix p(2, 3);
  p << 0.2, 0.4, 0.4, 0.5, 0.5, 0.0;
  EXPECT_EQ(argmax_rows(p), (std::vector<int>{1, 0}));
}

TEST(Batch, PredictProbaMatchesSingleSample) {
  Rng rng(11);
  const ModelState m = oracle::random_model(6, 4, 5, rng);
  const Matrix u = oracle::random_unit_rows(7, 6, rng);
  const Matrix p = predict_proba(m, u, 0.1);
  for (Eigen::Index i = 0; i < u.rows(); ++i) {
    const Vector single = classify(m, adapt(m, u.row(i).transpose()), 0.1);
    EXPECT_LT((p.row(i).transpose() - single).norm(), 1e-13);
  }
}

TEST(FeatureMatrix, ValidateCatchesBadRowsAndLabels) {
  FeatureMatrix fm;
  fm.data = Matrix::Identity(3, 3);
  fm.labels = {0, 1, 2};
  EXPECT_NO_THROW(fm.validate(1e-6, 3));
  EXPECT_THROW(fm.validate(1e-6, 2), DataError);
  fm.data(1, 1) = 2.0;
  EXPECT_THROW(fm.validate(), DataError);
}
