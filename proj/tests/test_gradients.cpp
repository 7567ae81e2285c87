#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace cgcd;

namespace {

constexpr double kStep = 1e-5;
constexpr double kTol = 1e-4;

// d = 8, k = 5 (3 old + 2 new), batch of 6, small projection.
struct Instance {
  ModelState model;
  ModelState previous;
  Matrix batch, v1, v2;
  std::vector<int> labels;
  ReplaySample replay;
  LabelSpace ls{1, 3, 3, 2};
  HyperParams hp;
  SharpenedTargets targets;  // held fixed, as in training

  explicit Instance(std::uint64_t seed, Eigen::Index b = 6) {
    Rng rng(seed);
    model = oracle::random_model(8, 6, 5, rng);
    previous = oracle::random_model(8, 6, 5, rng);
    batch = oracle::random_unit_rows(b, 8, rng);
    v1 = feature_augment_batch(batch, 0.3, rng);
    v2 = feature_augment_batch(batch, 0.3, rng);
    for (Eigen::Index i = 0; i < b; ++i) labels.push_back(static_cast<int>(i % 3));
    replay.features = oracle::random_unit_rows(4, 8, rng);
    replay.labels = {0, 2, 1, 2};
    targets = sharpened_targets(v1, v2, model, hp);
  }
};

class GradientSeeds : public ::testing::TestWithParam<int> {};

}  // namespace

TEST_P(GradientSeeds, Classification) {
  Instance in(GetParam());
  const auto r = oracle::check_model_gradient(in.model, [&](const ModelState& m) {
    return classification_objective(in.v1, in.v2, in.labels, m, in.hp.tau_p);
  }, kStep, kTol);
  EXPECT_TRUE(r.pass) << r.max_rel_error << " at " << r.worst_index;
}

TEST_P(GradientSeeds, SupervisedContrastive) {
  Instance in(GetParam());
  const auto r = oracle::check_model_gradient(in.model, [&](const ModelState& m) {
    return contrastive_objective(in.v1, in.v2, &in.labels, m, in.hp.tau_c_sup);
  }, kStep, kTol);
  EXPECT_TRUE(r.pass) << r.max_rel_error << " at " << r.worst_index;
}

TEST_P(GradientSeeds, SelfSupervisedContrastive) {
  Instance in(GetParam());
  const auto r = oracle::check_model_gradient(in.model, [&](const ModelState& m) {
    return contrastive_objective(in.v1, in.v2, nullptr, m, in.hp.tau_c_self);
  }, kStep, kTol);
  EXPECT_TRUE(r.pass) << r.max_rel_error << " at " << r.worst_index;
}

TEST_P(GradientSeeds, InitialObjective) {
  Instance in(GetParam());
  const auto r = oracle::check_model_gradient(in.model, [&](const ModelState& m) {
    return initial_objective(in.v1, in.v2, in.labels, m, in.hp);
  }, kStep, kTol);
  EXPECT_TRUE(r.pass) << r.max_rel_error << " at " << r.worst_index;
}

TEST_P(GradientSeeds, SelfTraining) {
  Instance in(GetParam());
  const auto r = oracle::check_model_gradient(in.model, [&](const ModelState& m) {
    return self_training_objective(in.v1, in.v2, m, in.ls, in.hp, &in.targets);
  }, kStep, kTol);
  EXPECT_TRUE(r.pass) << r.max_rel_error << " at " << r.worst_index;
}

TEST_P(GradientSeeds, SoftEntropyRegularizer) {
  Instance in(GetParam());
  const auto r = oracle::check_model_gradient(in.model, [&](const ModelState& m) {
    return entropy_regularizer_objective(in.v1, in.v2, m, in.ls, in.hp);
  }, kStep, kTol);
  EXPECT_TRUE(r.pass) << r.max_rel_error << " at " << r.worst_index;
}

TEST_P(GradientSeeds, PriorRatioRegularizer) {
  Instance in(GetParam());
  const RegularizerOptions reg{RegularizerKind::prior_ratio, 0.3, 0.7};
  const auto r = oracle::check_model_gradient(in.model, [&](const ModelState& m) {
    return entropy_regularizer_objective(in.v1, in.v2, m, in.ls, in.hp, reg);
  }, kStep, kTol);
  EXPECT_TRUE(r.pass) << r.max_rel_error << " at " << r.worst_index;
}

TEST_P(GradientSeeds, NewClassObjective) {
  Instance in(GetParam());
  const auto r = oracle::check_model_gradient(in.model, [&](const ModelState& m) {
    return new_class_objective(in.v1, in.v2, m, in.ls, in.hp, {}, &in.targets);
  }, kStep, kTol);
  EXPECT_TRUE(r.pass) << r.max_rel_error << " at " << r.worst_index;
}

TEST_P(GradientSeeds, PrototypeReplay) {
  Instance in(GetParam());
  const auto r = oracle::check_model_gradient(in.model, [&](const ModelState& m) {
    return prototype_replay_loss(in.replay, m, in.ls, in.hp.tau_p);
  }, kStep, kTol);
  EXPECT_TRUE(r.pass) << r.max_rel_error << " at " << r.worst_index;
}

TEST_P(GradientSeeds, KnowledgeDistillation) {
  Instance in(GetParam());
  const auto r = oracle::check_model_gradient(in.model, [&](const ModelState& m) {
    return knowledge_distillation_loss(m, in.previous, in.batch);
  }, kStep, kTol);
  EXPECT_TRUE(r.pass) << r.max_rel_error << " at " << r.worst_index;
}

TEST_P(GradientSeeds, OldClassObjective) {
  Instance in(GetParam());
  const auto r = oracle::check_model_gradient(in.model, [&](const ModelState& m) {
    return old_class_objective(in.batch, in.replay, m, in.previous, in.ls, in.hp);
  }, kStep, kTol);
  EXPECT_TRUE(r.pass) << r.max_rel_error << " at " << r.worst_index;
}

TEST_P(GradientSeeds, FullContinualObjective) {
  Instance in(GetParam());
  const auto r = oracle::check_model_gradient(in.model, [&](const ModelState& m) {
    return happy_objective(in.v1, in.v2, in.batch, in.replay, m, in.previous, in.ls, in.hp, {}, &in.targets);
  }, kStep, kTol);
  EXPECT_TRUE(r.pass) << r.max_rel_error << " at " << r.worst_index;
}

INSTANTIATE_TEST_SUITE_P(Seeds, GradientSeeds, ::testing::Range(0, 20));

TEST(Gradients, SelfTrainingOnFourSampleBatch) {
  Instance in(101, 4);
  const auto r = oracle::check_model_gradient(in.model, [&](const ModelState& m) {
    return self_training_objective(in.v1, in.v2, m, in.ls, in.hp, &in.targets);
  }, kStep, kTol);
  EXPECT_TRUE(r.pass) << r.max_rel_error;
}

TEST(Gradients, PinnedTargetsMatchRecomputedOnes) {
  Instance in(9);
  const LossValue a = self_training_objective(in.v1, in.v2, in.model, in.ls, in.hp);
  const LossValue b = self_training_objective(in.v1, in.v2, in.model, in.ls, in.hp, &in.targets);
  EXPECT_EQ(a.value, b.value);
  EXPECT_EQ(flatten(a.grads), flatten(b.grads));
}

TEST(Gradients, ReplayOnlyTouchesHeads) {
  Instance in(7);
  const LossValue l = prototype_replay_loss(in.replay, in.model, in.ls, in.hp.tau_p);
  EXPECT_TRUE(l.grads.adapter_w.isZero());
  EXPECT_TRUE(l.grads.adapter_b.isZero());
  EXPECT_TRUE(l.grads.projection.isZero());
  EXPECT_FALSE(l.grads.heads.isZero());
}

TEST(Gradients, KnowledgeDistillationOnlyTouchesAdapter) {
  Instance in(8);
  const LossValue l = knowledge_distillation_loss(in.model, in.previous, in.batch);
  EXPECT_FALSE(l.grads.adapter_w.isZero());
  EXPECT_TRUE(l.grads.projection.isZero());
  EXPECT_TRUE(l.grads.heads.isZero());
}
