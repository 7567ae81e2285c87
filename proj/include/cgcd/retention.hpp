#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "core_model.hpp"
#include "error.hpp"
#include "log.hpp"
#include "numerics.hpp"
#include "rng.hpp"

namespace cgcd {

/// Per-class prototypes on the sphere, shared Gaussian radius, and the
/// hardness-driven sampling distribution. Row c of `prototypes` is class c.
struct PrototypeStore {
  Matrix prototypes;            // K_seen x d, unit rows
  std::vector<int> source_stage;
  double radius = 0.0;
  double tau_h = 0.1;
  Vector hardness_scores;       // h_i, mean cosine to the other prototypes
  Vector hardness;              // softmax(h / tau_h)

  int size() const { return static_cast<int>(prototypes.rows()); }
};

struct PrototypeEstimate {
  Matrix prototypes;             // one row per target class, in target order
  std::vector<int> classes;
  std::vector<std::string> warnings;
};

/// Normalized per-class means of `z` over `class_ids`, restricted to
/// `target_classes`. Empty classes fall back to the normalized head row.
inline PrototypeEstimate estimate_prototypes(const Matrix& z, const std::vector<int>& class_ids,
                                             const std::vector<int>& target_classes,
                                             const Matrix& normalized_heads) {
  if (static_cast<Eigen::Index>(class_ids.size()) != z.rows()) {
    throw RuntimeError("estimate_prototypes: class id count mismatch");
  }
  const auto k = static_cast<int>(normalized_heads.rows());
  PrototypeEstimate out;
  out.classes = target_classes;
  out.prototypes.resize(static_cast<Eigen::Index>(target_classes.size()), z.cols());
  for (std::size_t t = 0; t < target_classes.size(); ++t) {
    const int c = target_classes[t];
    if (c < 0 || c >= k) throw RuntimeError("estimate_prototypes: class " + std::to_string(c) + " outside label space");
    Vector sum = Vector::Zero(z.cols());
    std::size_t members = 0;
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      if (class_ids[static_cast<std::size_t>(i)] == c) {
        sum += z.row(i).transpose();
        ++members;
      }
    }
    const double n = sum.norm();
    if (members == 0 || n < 1e-12) {
      out.warnings.push_back("class " + std::to_string(c) + " has no usable members; prototype falls back to its head");
      log::warn(out.warnings.back());
      out.prototypes.row(static_cast<Eigen::Index>(t)) = normalized_heads.row(c);
    } else {
      out.prototypes.row(static_cast<Eigen::Index>(t)) = (sum / n).transpose();
    }
  }
  return out;
}

/// sqrt( (1/K) sum_c Tr(Cov_c) / d ) over classes [0, k_init), population covariance.
inline double shared_radius(const Matrix& z, const std::vector<int>& labels, int k_init) {
  if (static_cast<Eigen::Index>(labels.size()) != z.rows()) throw RuntimeError("shared_radius: label count mismatch");
  if (k_init < 1) throw RuntimeError("shared_radius: k_init must be >= 1");
  double total = 0.0;
  for (int c = 0; c < k_init; ++c) {
    Vector mean = Vector::Zero(z.cols());
    std::size_t members = 0;
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      if (labels[static_cast<std::size_t>(i)] == c) {
        mean += z.row(i).transpose();
        ++members;
      }
    }
    if (members == 0) throw DataError("shared_radius: class " + std::to_string(c) + " is empty");
    mean /= static_cast<double>(members);
    double trace = 0.0;
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      if (labels[static_cast<std::size_t>(i)] == c) trace += (z.row(i).transpose() - mean).squaredNorm();
    }
    total += trace / static_cast<double>(members);
  }
  return std::sqrt(total / static_cast<double>(k_init) / static_cast<double>(z.cols()));
}

struct Hardness {
  Vector scores;        // h_i
  Vector distribution;  // softmax(h / tau_h)
};

inline Hardness hardness_distribution(const Matrix& prototypes, double tau_h) {
  const Eigen::Index k = prototypes.rows();
  if (k < 2) throw RuntimeError("hardness_distribution: need at least two prototypes");
  if (!(tau_h > 0.0)) throw ConfigError("tau_h must be > 0");
  Matrix unit = prototypes;
  for (Eigen::Index i = 0; i < k; ++i) unit.row(i).normalize();
  const Matrix cos = unit * unit.transpose();
  Hardness out;
  out.scores.resize(k);
  for (Eigen::Index i = 0; i < k; ++i) {
    double s = 0.0;
    for (Eigen::Index j = 0; j < k; ++j) {
      if (j != i) s += cos(i, j);
    }
    out.scores(i) = s / static_cast<double>(k - 1);
  }
  Vector logits = out.scores / tau_h;
  logits.array() -= logits.maxCoeff();
  out.distribution = logits.array().exp();
  out.distribution /= out.distribution.sum();
  return out;
}

inline void refresh_hardness(PrototypeStore& store) {
  if (store.size() < 2) {
    store.hardness_scores = Vector::Zero(store.size());
    store.hardness = Vector::Constant(store.size(), 1.0 / std::max(1, store.size()));
    return;
  }
  Hardness h = hardness_distribution(store.prototypes, store.tau_h);
  store.hardness_scores = std::move(h.scores);
  store.hardness = std::move(h.distribution);
}

enum class SamplingMode { hardness, uniform };

struct ReplaySample {
  Matrix features;
  std::vector<int> labels;
};

// Inverse-CDF draw from a categorical distribution.
inline int sample_categorical(const Vector& p, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    acc += p(i);
    if (u < acc) return static_cast<int>(i);
  }
  // rounding left a sliver of mass past the end; give it to the last class with mass
  for (Eigen::Index i = p.size() - 1; i >= 0; --i) {
    if (p(i) > 0.0) return static_cast<int>(i);
  }
  return 0;
}

/// n draws: class ~ p_hardness (or uniform), z ~ N(mu_c, r^2 I), renormalized.
inline ReplaySample sample_replay_features(const PrototypeStore& store, int n, Rng& rng,
                                           SamplingMode mode = SamplingMode::hardness) {
  ReplaySample out;
  const Eigen::Index d = store.prototypes.cols();
  out.features.resize(std::max(n, 0), d);
  out.labels.resize(static_cast<std::size_t>(std::max(n, 0)));
  if (n <= 0) return out;
  if (store.size() == 0) throw RuntimeError("sample_replay_features: empty prototype store");
  const Vector dist = mode == SamplingMode::uniform
                          ? Vector::Constant(store.size(), 1.0 / store.size())
                          : store.hardness;
  for (int s = 0; s < n; ++s) {
    const int c = sample_categorical(dist, rng);
    out.labels[static_cast<std::size_t>(s)] = c;
    if (store.radius == 0.0) {
      out.features.row(s) = store.prototypes.row(c);
      continue;
    }
    for (;;) {
      Vector z = store.prototypes.row(c).transpose();
      for (Eigen::Index j = 0; j < d; ++j) z(j) += store.radius * rng.normal();
      const double norm = z.norm();
      if (norm > 0.0) {
        out.features.row(s) = (z / norm).transpose();
        break;
      }
    }
  }
  return out;
}

/// Mean cross-entropy of replayed features against their class labels.
/// Features are constants, so only the heads receive gradient.
inline LossValue prototype_replay_loss(const ReplaySample& sample, const ModelState& model, const LabelSpace& ls,
                                       double tau_p) {
  LossValue out = LossValue::zero(model);
  const Eigen::Index n = sample.features.rows();
  if (n == 0) return out;
  for (int y : sample.labels) {
    if (y < 0 || y >= ls.k_old || y >= model.k()) {
      throw RuntimeError("prototype_replay_loss: label " + std::to_string(y) + " outside the old-class range");
    }
  }
  const NormalizedRows heads = normalized_heads(model);
  const Matrix p = softmax_rows(head_logits(heads, sample.features, tau_p));
  Matrix gl = p;
  for (Eigen::Index i = 0; i < n; ++i) {
    const int y = sample.labels[static_cast<std::size_t>(i)];
    out.value -= std::log(p(i, y));
    gl(i, y) -= 1.0;
  }
  out.value /= static_cast<double>(n);
  gl /= static_cast<double>(n);
  Matrix grad_heads_hat = Matrix::Zero(model.k(), model.d());
  logits_backward(heads, sample.features, gl, tau_p, grad_heads_hat);
  heads_backward(heads, grad_heads_hat, out.grads);
  return out;
}

/// Mean (1 - cos) between current and frozen previous adapter outputs.
inline LossValue knowledge_distillation_loss(const ModelState& current, const ModelState& previous,
                                             const Matrix& batch) {
  LossValue out = LossValue::zero(current);
  const Eigen::Index n = batch.rows();
  if (n == 0) return out;
  const NormalizedRows z = adapt_batch(current, batch);
  const NormalizedRows z_prev = adapt_batch(previous, batch);
  const double inv = 1.0 / static_cast<double>(n);
  for (Eigen::Index i = 0; i < n; ++i) out.value += inv * (1.0 - z.out.row(i).dot(z_prev.out.row(i)));
  const Matrix gz = -inv * z_prev.out;
  adapter_backward(current, batch, z, gz, out.grads);
  return out;
}

/// Replay loss on a given sample plus lambda2 * KD on the current batch.
inline LossValue old_class_objective(const Matrix& batch, const ReplaySample& replay, const ModelState& model,
                                     const ModelState& previous, const LabelSpace& ls, const HyperParams& hp) {
  LossValue out = prototype_replay_loss(replay, model, ls, hp.tau_p);
  if (hp.lambda2 != 0.0) out.add_scaled(knowledge_distillation_loss(model, previous, batch), hp.lambda2);
  return out;
}

inline LossValue old_class_objective(const Matrix& batch, const ModelState& model, const ModelState& previous,
                                     const PrototypeStore& store, const LabelSpace& ls, const HyperParams& hp,
                                     Rng& replay_rng, SamplingMode mode = SamplingMode::hardness) {
  const ReplaySample replay = sample_replay_features(store, hp.n_proto, replay_rng, mode);
  return old_class_objective(batch, replay, model, previous, ls, hp);
}

}  // namespace cgcd
