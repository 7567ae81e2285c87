#pragma once

#include <cmath>
#include <vector>

#include "core_model.hpp"
#include "error.hpp"
#include "numerics.hpp"
#include "rng.hpp"

namespace cgcd {

/// Batch-mean class distribution and its old/new group masses.
struct MarginalDistribution {
  Vector per_class;
  double p_old = 0.0;
  double p_new = 0.0;
  int k_old = 0;
};

/// Gaussian perturbation on the sphere: normalize(u + eps), eps ~ N(0, sigma^2 I).
inline Vector feature_augment(const Vector& u, double sigma, Rng& rng) {
  if (sigma < 0.0) throw ConfigError("sigma_aug must be >= 0");
  if (sigma == 0.0) return u;
  for (;;) {
    Vector v = u;
    for (Eigen::Index j = 0; j < v.size(); ++j) v(j) += sigma * rng.normal();
    const double n = v.norm();
    if (n > 0.0) return v / n;
  }
}

inline Matrix feature_augment_batch(const Matrix& u, double sigma, Rng& rng) {
  Matrix out(u.rows(), u.cols());
  for (Eigen::Index i = 0; i < u.rows(); ++i) out.row(i) = feature_augment(u.row(i).transpose(), sigma, rng).transpose();
  return out;
}

struct SelfDistillation {
  double value = 0.0;
  Matrix grad_p;        // dL/dp (probabilities of view 1)
  Matrix grad_p_prime;  // dL/dp' (view 2)
};

/// (1 / 2B) sum_i CE(q'_i, p_i) + CE(q_i, p'_i). Targets are constants.
inline SelfDistillation self_distillation_loss(const Matrix& p, const Matrix& p_prime, const Matrix& q,
                                               const Matrix& q_prime) {
  if (p.rows() != p_prime.rows() || p.rows() != q.rows() || p.rows() != q_prime.rows() ||
      p.cols() != p_prime.cols() || p.cols() != q.cols() || p.cols() != q_prime.cols()) {
    throw RuntimeError("self_distillation_loss: shape mismatch");
  }
  const double scale = 1.0 / (2.0 * static_cast<double>(p.rows()));
  SelfDistillation out;
  out.grad_p = Matrix::Zero(p.rows(), p.cols());
  out.grad_p_prime = Matrix::Zero(p.rows(), p.cols());
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    out.value += scale * cross_entropy(q_prime.row(i).transpose(), p.row(i).transpose());
    out.value += scale * cross_entropy(q.row(i).transpose(), p_prime.row(i).transpose());
    out.grad_p.row(i) = -scale * (q_prime.row(i).array() / p.row(i).array());
    out.grad_p_prime.row(i) = -scale * (q.row(i).array() / p_prime.row(i).array());
  }
  return out;
}

inline MarginalDistribution marginal_distribution(const Matrix& probs, const LabelSpace& ls) {
  if (probs.rows() == 0) throw RuntimeError("marginal_distribution: empty batch");
  if (probs.cols() != ls.k()) throw RuntimeError("marginal_distribution: class count mismatch");
  MarginalDistribution m;
  m.k_old = ls.k_old;
  m.per_class = probs.colwise().mean().transpose();
  m.p_old = m.per_class.head(ls.k_old).sum();
  m.p_new = m.per_class.tail(ls.k_new).sum();
  return m;
}

struct RegularizerValue {
  double value = 0.0;
  double inter = 0.0;      // old vs new
  double intra_old = 0.0;
  double intra_new = 0.0;
  Vector grad_marginal;    // dL / d per_class
};

namespace detail {

inline double xlogx(double x) { return x > 0.0 ? x * std::log(x) : 0.0; }

// sum_c r_c log r_c over r = group / sum(group), and its gradient w.r.t. the
// unnormalized group entries. A zero-mass group contributes nothing.
inline double normalized_neg_entropy(const Vector& group, Vector& grad) {
  grad.setZero(group.size());
  const double s = group.sum();
  if (!(s > 0.0)) return 0.0;
  double value = 0.0;
  for (Eigen::Index c = 0; c < group.size(); ++c) value += xlogx(group(c) / s);
  for (Eigen::Index c = 0; c < group.size(); ++c) {
    const double r = group(c) / s;
    if (r > 0.0) grad(c) = (std::log(r) - value) / s;
  }
  return value;
}

}  // namespace detail

/// Group-wise negative entropy: inter old/new on (p_old, p_new), plus the
/// within-old and within-new terms on renormalized group distributions.
inline RegularizerValue soft_entropy_regularizer(const MarginalDistribution& m) {
  const Eigen::Index k = m.per_class.size();
  const Eigen::Index k_new = k - m.k_old;
  RegularizerValue out;
  out.grad_marginal = Vector::Zero(k);
  out.inter = detail::xlogx(m.p_old) + detail::xlogx(m.p_new);
  // d/dp_c of p_g log p_g = log p_g + 1 for every c in group g
  if (m.p_old > 0.0) out.grad_marginal.head(m.k_old).array() += std::log(m.p_old) + 1.0;
  if (m.p_new > 0.0 && k_new > 0) out.grad_marginal.tail(k_new).array() += std::log(m.p_new) + 1.0;

  Vector g;
  out.intra_old = detail::normalized_neg_entropy(m.per_class.head(m.k_old), g);
  out.grad_marginal.head(m.k_old) += g;
  if (k_new > 0) {
    out.intra_new = detail::normalized_neg_entropy(m.per_class.tail(k_new), g);
    out.grad_marginal.tail(k_new) += g;
  }
  out.value = out.inter + out.intra_old + out.intra_new;
  return out;
}

/// Inter-group term replaced by a cross-entropy against known group ratios;
/// within-group terms unchanged. `value`/`inter` hold only the prior term
/// when called directly; see regularizer_with_prior for the full variant.
inline RegularizerValue prior_ratio_regularizer(const MarginalDistribution& m, double gt_old, double gt_new) {
  if (std::abs(gt_old + gt_new - 1.0) > 1e-9 || gt_old < 0.0 || gt_new < 0.0) {
    throw ConfigError("prior ratios must be non-negative and sum to 1");
  }
  const Eigen::Index k = m.per_class.size();
  RegularizerValue out;
  out.grad_marginal = Vector::Zero(k);
  auto term = [&](double gt, double p, auto block) {
    if (gt == 0.0) return;
    if (!(p > 0.0)) throw RuntimeError("log of zero");
    out.inter -= gt * std::log(p);
    block.array() -= gt / p;
  };
  term(gt_old, m.p_old, out.grad_marginal.head(m.k_old));
  term(gt_new, m.p_new, out.grad_marginal.tail(k - m.k_old));
  out.value = out.inter;
  return out;
}

// Prior-ratio inter term plus the two within-group entropy terms.
inline RegularizerValue regularizer_with_prior(const MarginalDistribution& m, double gt_old, double gt_new) {
  RegularizerValue soft = soft_entropy_regularizer(m);
  RegularizerValue prior = prior_ratio_regularizer(m, gt_old, gt_new);
  RegularizerValue out;
  out.inter = prior.inter;
  out.intra_old = soft.intra_old;
  out.intra_new = soft.intra_new;
  out.value = out.inter + out.intra_old + out.intra_new;
  // drop the soft inter-group gradient, keep the within-group part
  const Eigen::Index k_new = m.per_class.size() - m.k_old;
  Vector intra = soft.grad_marginal;
  if (m.p_old > 0.0) intra.head(m.k_old).array() -= std::log(m.p_old) + 1.0;
  if (m.p_new > 0.0 && k_new > 0) intra.tail(k_new).array() -= std::log(m.p_new) + 1.0;
  out.grad_marginal = intra + prior.grad_marginal;
  return out;
}

enum class RegularizerKind { none, soft_entropy, prior_ratio };

struct RegularizerOptions {
  RegularizerKind kind = RegularizerKind::soft_entropy;
  double gt_old = 0.5;
  double gt_new = 0.5;
};

/// Sharpened self-training targets for both views. Passing them pins the
/// targets; otherwise they are recomputed from the model on every call.
struct SharpenedTargets {
  Matrix q1;
  Matrix q2;
};

inline SharpenedTargets sharpened_targets(const Matrix& view1, const Matrix& view2, const ModelState& model,
                                          const HyperParams& hp) {
  const NormalizedRows heads = normalized_heads(model);
  return {softmax_rows(head_logits(heads, adapt_batch(model, view1).out, 1.0) / hp.tau_t),
          softmax_rows(head_logits(heads, adapt_batch(model, view2).out, 1.0) / hp.tau_t)};
}

namespace detail {

// Shared forward/backward for the discovery terms: self_train_weight scales
// the self-distillation loss, reg_weight the marginal regularizer.
inline LossValue discovery_terms(const Matrix& view1, const Matrix& view2, const ModelState& model,
                                 const LabelSpace& ls, const HyperParams& hp, const RegularizerOptions& reg,
                                 double self_train_weight, double reg_weight,
                                 const SharpenedTargets* fixed = nullptr) {
  if (ls.k_new < 1) throw RuntimeError("discovery objective requires a continual stage with new classes");
  if (model.k() != ls.k()) throw RuntimeError("discovery objective: head count does not match label space");
  if (view1.rows() != view2.rows()) throw RuntimeError("discovery objective: view size mismatch");
  const Eigen::Index b = view1.rows();
  LossValue out = LossValue::zero(model);
  const NormalizedRows heads = normalized_heads(model);
  const NormalizedRows z1 = adapt_batch(model, view1);
  const NormalizedRows z2 = adapt_batch(model, view2);
  const Matrix cos1 = head_logits(heads, z1.out, 1.0);
  const Matrix cos2 = head_logits(heads, z2.out, 1.0);
  const Matrix p1 = softmax_rows(cos1 / hp.tau_p);
  const Matrix p2 = softmax_rows(cos2 / hp.tau_p);
  Matrix gp1 = Matrix::Zero(b, model.k());
  Matrix gp2 = Matrix::Zero(b, model.k());

  if (self_train_weight != 0.0) {
    // sharpened targets are constants
    const Matrix q1 = fixed ? fixed->q1 : Matrix(softmax_rows(cos1 / hp.tau_t));
    const Matrix q2 = fixed ? fixed->q2 : Matrix(softmax_rows(cos2 / hp.tau_t));
    const SelfDistillation sd = self_distillation_loss(p1, p2, q1, q2);
    out.value += self_train_weight * sd.value;
    gp1 += self_train_weight * sd.grad_p;
    gp2 += self_train_weight * sd.grad_p_prime;
  }
  if (reg.kind != RegularizerKind::none && reg_weight != 0.0) {
    Matrix both(2 * b, model.k());
    both.topRows(b) = p1;
    both.bottomRows(b) = p2;
    const MarginalDistribution marginal = marginal_distribution(both, ls);
    const RegularizerValue r = reg.kind == RegularizerKind::prior_ratio
                                   ? regularizer_with_prior(marginal, reg.gt_old, reg.gt_new)
                                   : soft_entropy_regularizer(marginal);
    out.value += reg_weight * r.value;
    const Vector g = reg_weight * r.grad_marginal / static_cast<double>(2 * b);
    gp1.rowwise() += g.transpose();
    gp2.rowwise() += g.transpose();
  }

  Matrix grad_heads_hat = Matrix::Zero(model.k(), model.d());
  const Matrix gz1 = logits_backward(heads, z1.out, softmax_rows_backward(p1, gp1), hp.tau_p, grad_heads_hat);
  const Matrix gz2 = logits_backward(heads, z2.out, softmax_rows_backward(p2, gp2), hp.tau_p, grad_heads_hat);
  adapter_backward(model, view1, z1, gz1, out.grads);
  adapter_backward(model, view2, z2, gz2, out.grads);
  heads_backward(heads, grad_heads_hat, out.grads);
  return out;
}

}  // namespace detail

/// Symmetric self-distillation between two augmented views.
inline LossValue self_training_objective(const Matrix& view1, const Matrix& view2, const ModelState& model,
                                         const LabelSpace& ls, const HyperParams& hp,
                                         const SharpenedTargets* fixed = nullptr) {
  return detail::discovery_terms(view1, view2, model, ls, hp, RegularizerOptions{RegularizerKind::none}, 1.0, 0.0,
                                 fixed);
}

/// The marginal regularizer alone (unweighted), over both views' predictions.
inline LossValue entropy_regularizer_objective(const Matrix& view1, const Matrix& view2, const ModelState& model,
                                               const LabelSpace& ls, const HyperParams& hp,
                                               const RegularizerOptions& reg = {}) {
  return detail::discovery_terms(view1, view2, model, ls, hp, reg, 0.0, 1.0);
}

/// L_self-train + lambda1 * regularizer for two already-augmented views.
/// The marginal is taken over both views' predictions.
inline LossValue new_class_objective(const Matrix& view1, const Matrix& view2, const ModelState& model,
                                     const LabelSpace& ls, const HyperParams& hp,
                                     const RegularizerOptions& reg = {}, const SharpenedTargets* fixed = nullptr) {
  return detail::discovery_terms(view1, view2, model, ls, hp, reg, 1.0, hp.lambda1, fixed);
}

/// Same objective, drawing the two views from the augment stream.
inline LossValue new_class_objective(const Matrix& batch, const ModelState& model, const LabelSpace& ls,
                                     const HyperParams& hp, Rng& augment_rng,
                                     const RegularizerOptions& reg = {}) {
  const Matrix v1 = feature_augment_batch(batch, hp.sigma_aug, augment_rng);
  const Matrix v2 = feature_augment_batch(batch, hp.sigma_aug, augment_rng);
  return new_class_objective(v1, v2, model, ls, hp, reg);
}

}  // namespace cgcd
