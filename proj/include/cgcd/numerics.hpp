#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include "core_model.hpp"
#include "error.hpp"

namespace cgcd {

/// A scalar objective together with its gradient w.r.t. every parameter block.
struct LossValue {
  double value = 0.0;
  ModelGrads grads;
  std::vector<std::string> warnings;

  static LossValue zero(const ModelState& m) { return LossValue{0.0, ModelGrads::zeros_like(m), {}}; }

  LossValue& add_scaled(const LossValue& o, double s) {
    value += s * o.value;
    grads.add_scaled(o.grads, s);
    warnings.insert(warnings.end(), o.warnings.begin(), o.warnings.end());
    return *this;
  }
};

/// -sum_k target_k log pred_k with 0 log 0 = 0 on the target side.
inline double cross_entropy(const Vector& target, const Vector& pred) {
  if (target.size() != pred.size()) throw RuntimeError("cross_entropy: size mismatch");
  double s = 0.0;
  for (Eigen::Index k = 0; k < target.size(); ++k) {
    if (target(k) == 0.0) continue;
    if (!(pred(k) > 0.0)) throw RuntimeError("log of zero");
    s -= target(k) * std::log(pred(k));
  }
  return s;
}

/// Value and gradients of a contrastive loss w.r.t. both projection views.
struct ContrastiveLoss {
  double value = 0.0;
  Matrix grad_h;
  Matrix grad_h_prime;
  std::size_t skipped_anchors = 0;
};

namespace detail {

// log sum_{n != i} exp(s(i, n)) and the normalized weights over n != i.
inline double log_sum_exp_excluding(const Matrix& s, Eigen::Index i, Vector& weights) {
  const Eigen::Index n = s.cols();
  double mx = -std::numeric_limits<double>::infinity();
  for (Eigen::Index j = 0; j < n; ++j) {
    if (j != i) mx = std::max(mx, s(i, j));
  }
  double sum = 0.0;
  weights.setZero(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    if (j == i) continue;
    weights(j) = std::exp(s(i, j) - mx);
    sum += weights(j);
  }
  weights /= sum;
  return mx + std::log(sum);
}

// Given dL/ds for s = H H'^T / tau, fill the view gradients.
inline void similarity_backward(const Matrix& h, const Matrix& h_prime, const Matrix& grad_s, double tau,
                                ContrastiveLoss& out) {
  out.grad_h = grad_s * h_prime / tau;
  out.grad_h_prime = grad_s.transpose() * h / tau;
}

}  // namespace detail

/// Supervised contrastive term over two projected views. Denominators exclude
/// the anchor index; positives are same-label samples other than the anchor.
/// Anchors without positives are skipped and counted.
inline ContrastiveLoss supervised_contrastive_loss(const Matrix& h, const Matrix& h_prime,
                                                   const std::vector<int>& labels, double tau) {
  const Eigen::Index n = h.rows();
  if (h_prime.rows() != n || h.cols() != h_prime.cols()) {
    throw RuntimeError("supervised_contrastive_loss: view shape mismatch");
  }
  if (static_cast<Eigen::Index>(labels.size()) != n) {
    throw RuntimeError("supervised_contrastive_loss: label count mismatch");
  }
  ContrastiveLoss out;
  if (n < 2) {
    out.skipped_anchors = static_cast<std::size_t>(n);
    out.grad_h = Matrix::Zero(h.rows(), h.cols());
    out.grad_h_prime = Matrix::Zero(h.rows(), h.cols());
    return out;
  }
  const Matrix s = h * h_prime.transpose() / tau;
  Matrix grad_s = Matrix::Zero(n, n);
  const double inv_b = 1.0 / static_cast<double>(n);
  Vector w;
  for (Eigen::Index i = 0; i < n; ++i) {
    std::vector<Eigen::Index> positives;
    for (Eigen::Index q = 0; q < n; ++q) {
      if (q != i && labels[static_cast<std::size_t>(q)] == labels[static_cast<std::size_t>(i)]) {
        positives.push_back(q);
      }
    }
    if (positives.empty()) {
      ++out.skipped_anchors;
      continue;
    }
    const double lse = detail::log_sum_exp_excluding(s, i, w);
    const double inv_p = 1.0 / static_cast<double>(positives.size());
    for (Eigen::Index q : positives) {
      out.value -= inv_b * inv_p * (s(i, q) - lse);
      grad_s(i, q) -= inv_b * inv_p;
    }
    // each positive contributes +lse, so the weights enter once with total mass inv_b
    grad_s.row(i) += inv_b * w.transpose();
  }
  detail::similarity_backward(h, h_prime, grad_s, tau, out);
  return out;
}

/// Self-supervised contrastive term: the positive of anchor i is h'_i.
inline ContrastiveLoss self_supervised_contrastive_loss(const Matrix& h, const Matrix& h_prime, double tau) {
  const Eigen::Index n = h.rows();
  if (h_prime.rows() != n || h.cols() != h_prime.cols()) {
    throw RuntimeError("self_supervised_contrastive_loss: view shape mismatch");
  }
  if (n < 2) throw RuntimeError("no negatives");
  ContrastiveLoss out;
  const Matrix s = h * h_prime.transpose() / tau;
  Matrix grad_s = Matrix::Zero(n, n);
  const double inv_b = 1.0 / static_cast<double>(n);
  Vector w;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double lse = detail::log_sum_exp_excluding(s, i, w);
    out.value -= inv_b * (s(i, i) - lse);
    grad_s(i, i) -= inv_b;
    grad_s.row(i) += inv_b * w.transpose();
  }
  detail::similarity_backward(h, h_prime, grad_s, tau, out);
  return out;
}

/// Cosine-annealed learning rate, stepped per epoch.
struct ScheduleState {
  double base_lr = 0.0;
  int total_epochs = 1;
  int current_epoch = 0;

  double lr() const {
    if (total_epochs <= 0) return base_lr;
    if (current_epoch < 0 || current_epoch > total_epochs) {
      throw RuntimeError("schedule: epoch outside [0, total_epochs]");
    }
    return base_lr * 0.5 *
           (1.0 + std::cos(std::numbers::pi * static_cast<double>(current_epoch) /
                           static_cast<double>(total_epochs)));
  }
};

/// Plain SGD: params <- params - lr * grads.
inline void sgd_step(Vector& params, const Vector& grads, const ScheduleState& schedule) {
  if (params.size() != grads.size()) throw RuntimeError("sgd_step: shape mismatch");
  const double lr = schedule.lr();
  if (lr == 0.0) return;
  params -= lr * grads;
}

inline void sgd_step(ModelState& m, const ModelGrads& g, const ScheduleState& schedule) {
  auto check = [](const auto& a, const auto& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw RuntimeError("sgd_step: shape mismatch");
  };
  check(m.adapter_w, g.adapter_w);
  check(m.adapter_b, g.adapter_b);
  check(m.projection, g.projection);
  check(m.heads, g.heads);
  const double lr = schedule.lr();
  if (lr == 0.0) return;
  m.adapter_w -= lr * g.adapter_w;
  m.adapter_b -= lr * g.adapter_b;
  m.projection -= lr * g.projection;
  m.heads -= lr * g.heads;
}

struct GradientCheckReport {
  double max_rel_error = 0.0;
  Eigen::Index worst_index = -1;
  bool pass = false;
};

/// Central-difference gradient check. Relative error per coordinate is
/// |a - n| / max(|a|, |n|, 1e-8).
inline GradientCheckReport finite_difference_check(const std::function<double(const Vector&)>& loss_fn,
                                                   const Vector& params, const Vector& analytic,
                                                   double h, double tolerance) {
  if (!(h > 0.0)) throw RuntimeError("finite_difference_check: step must be > 0");
  if (analytic.size() != params.size()) throw RuntimeError("finite_difference_check: gradient size mismatch");
  GradientCheckReport report;
  Vector p = params;
  for (Eigen::Index i = 0; i < params.size(); ++i) {
    const double orig = p(i);
    p(i) = orig + h;
    const double fp = loss_fn(p);
    p(i) = orig - h;
    const double fm = loss_fn(p);
    p(i) = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) throw RuntimeError("finite_difference_check: non-finite loss");
    const double numeric = (fp - fm) / (2.0 * h);
    const double a = analytic(i);
    const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
    if (report.worst_index < 0 || rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_index = i;
    }
  }
  report.pass = report.max_rel_error <= tolerance;
  return report;
}

}  // namespace cgcd
