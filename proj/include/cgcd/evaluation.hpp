#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "core_model.hpp"
#include "error.hpp"

namespace cgcd {

/// Minimum-cost perfect matching on a square cost matrix (Kuhn-Munkres with
/// potentials, O(n^3)). Returns row -> column.
inline std::vector<int> hungarian_min_cost(const std::vector<std::vector<std::int64_t>>& cost) {
  const std::size_t n = cost.size();
  for (const auto& row : cost) {
    if (row.size() != n) throw RuntimeError("hungarian: cost matrix must be square");
  }
  constexpr std::int64_t inf = std::numeric_limits<std::int64_t>::max() / 4;
  // 1-based arrays; column 0 is a sentinel
  std::vector<std::int64_t> u(n + 1, 0), v(n + 1, 0);
  std::vector<std::size_t> match(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    match[0] = i;
    std::size_t j0 = 0;
    std::vector<std::int64_t> minv(n + 1, inf);
    std::vector<bool> used(n + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = match[j0];
      std::int64_t delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const std::int64_t cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> row_to_col(n, -1);
  for (std::size_t j = 1; j <= n; ++j) {
    if (match[j] != 0) row_to_col[match[j] - 1] = static_cast<int>(j - 1);
  }
  return row_to_col;
}

struct StageEval {
  int stage = 0;
  int k_old = 0;
  int k_new = 0;
  std::size_t n_samples = 0;
  std::size_t n_correct = 0;
  double acc_all = 0.0;                  // percent
  std::optional<double> acc_old;         // percent, absent without old samples
  std::optional<double> acc_new;         // percent, absent without new samples
  std::optional<double> acc_init;        // percent over initial labelled classes
  std::map<int, double> per_class_acc;   // true class -> percent
  std::vector<int> permutation;          // predicted id -> matched true id
  bool old_heads_fixed = false;          // matched permutation maps every old id to itself
};

/// Accuracy under the single best bijection between predicted and true ids.
/// `n_pred` is the size of the predicted id space (defaults to ls.k()); when it
/// differs from the true class count the matrix is padded to square.
inline StageEval hungarian_accuracy(const std::vector<int>& y_true, const std::vector<int>& y_pred,
                                    const LabelSpace& ls, int n_pred = -1) {
  if (y_true.size() != y_pred.size()) throw DataError("hungarian_accuracy: length mismatch");
  if (y_true.empty()) throw DataError("hungarian_accuracy: no samples");
  if (n_pred < 0) n_pred = ls.k();
  const int k = std::max(ls.k(), n_pred);
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    if (y_pred[i] < 0 || y_pred[i] >= n_pred) {
      throw DataError("hungarian_accuracy: predicted id " + std::to_string(y_pred[i]) + " outside [0, k)");
    }
    if (y_true[i] < 0 || y_true[i] >= ls.k()) {
      throw DataError("hungarian_accuracy: true label " + std::to_string(y_true[i]) + " outside [0, k)");
    }
  }
  // counts[pred][true]
  std::vector<std::vector<std::int64_t>> counts(static_cast<std::size_t>(k), std::vector<std::int64_t>(static_cast<std::size_t>(k), 0));
  for (std::size_t i = 0; i < y_true.size(); ++i) ++counts[static_cast<std::size_t>(y_pred[i])][static_cast<std::size_t>(y_true[i])];
  auto cost = counts;
  for (auto& row : cost) {
    for (auto& c : row) c = -c;
  }
  StageEval ev;
  ev.stage = ls.stage;
  ev.k_old = ls.k_old;
  ev.k_new = ls.k_new;
  ev.permutation = hungarian_min_cost(cost);
  ev.n_samples = y_true.size();

  std::vector<std::size_t> class_total(static_cast<std::size_t>(k), 0), class_hit(static_cast<std::size_t>(k), 0);
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    const auto t = static_cast<std::size_t>(y_true[i]);
    ++class_total[t];
    if (ev.permutation[static_cast<std::size_t>(y_pred[i])] == y_true[i]) ++class_hit[t];
  }
  std::size_t old_n = 0, old_hit = 0, new_n = 0, new_hit = 0, init_n = 0, init_hit = 0;
  for (int c = 0; c < k; ++c) {
    const auto idx = static_cast<std::size_t>(c);
    if (class_total[idx] == 0) continue;
    ev.per_class_acc[c] = 100.0 * static_cast<double>(class_hit[idx]) / static_cast<double>(class_total[idx]);
    ev.n_correct += class_hit[idx];
    if (ls.is_old(c)) {
      old_n += class_total[idx];
      old_hit += class_hit[idx];
    } else {
      new_n += class_total[idx];
      new_hit += class_hit[idx];
    }
    if (c < ls.k_init) {
      init_n += class_total[idx];
      init_hit += class_hit[idx];
    }
  }
  auto pct = [](std::size_t hit, std::size_t n) { return 100.0 * static_cast<double>(hit) / static_cast<double>(n); };
  ev.acc_all = pct(ev.n_correct, ev.n_samples);
  if (old_n > 0) ev.acc_old = pct(old_hit, old_n);
  if (new_n > 0) ev.acc_new = pct(new_hit, new_n);
  if (init_n > 0) ev.acc_init = pct(init_hit, init_n);
  ev.old_heads_fixed = true;
  for (int c = 0; c < std::min(ls.k_old, n_pred); ++c) {
    if (ev.permutation[static_cast<std::size_t>(c)] != c) ev.old_heads_fixed = false;
  }
  return ev;
}

/// max over t >= 1 of (acc_init[0] - acc_init[t]); 0 when only Stage-0 exists.
inline double forgetting_metric(const std::vector<double>& acc_init) {
  if (acc_init.empty()) throw RuntimeError("forgetting_metric: empty sequence");
  if (acc_init.size() == 1) return 0.0;
  double worst = -std::numeric_limits<double>::infinity();
  for (std::size_t t = 1; t < acc_init.size(); ++t) worst = std::max(worst, acc_init[0] - acc_init[t]);
  return worst;
}

/// Mean New accuracy over the continual stages.
inline double discovery_metric(const std::vector<double>& acc_new) {
  if (acc_new.empty()) throw RuntimeError("discovery_metric: empty sequence");
  double s = 0.0;
  for (double a : acc_new) s += a;
  return s / static_cast<double>(acc_new.size());
}

struct PredictionBias {
  double delta_p = 0.0;  // percent
  double delta_r = 0.0;  // percent
};

inline PredictionBias prediction_bias_metrics(const Matrix& probs, const std::vector<int>& y_true,
                                              const LabelSpace& ls) {
  if (static_cast<Eigen::Index>(y_true.size()) != probs.rows()) throw DataError("prediction_bias_metrics: length mismatch");
  if (probs.cols() != ls.k()) throw DataError("prediction_bias_metrics: class count mismatch");
  const Vector marginal = probs.colwise().mean().transpose();
  PredictionBias out;
  out.delta_p = 100.0 * (marginal.head(ls.k_old).sum() - marginal.tail(ls.k_new).sum());
  const std::vector<int> pred = argmax_rows(probs);
  std::size_t n_new = 0, as_old = 0;
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    if (!ls.is_new(y_true[i])) continue;
    ++n_new;
    if (ls.is_old(pred[i])) ++as_old;
  }
  if (n_new == 0) throw DataError("prediction_bias_metrics: no new-class samples");
  out.delta_r = 100.0 * static_cast<double>(as_old) / static_cast<double>(n_new);
  return out;
}

struct HardnessBias {
  double var0 = 0.0;   // population variance of init-class accuracies
  double acc_h = 0.0;  // accuracy of the hardest init class
  int hardest_class = -1;
};

/// hardness_scores[c] is h_c; the hardest init class has the largest h (ties to lower id).
inline HardnessBias hardness_bias_metrics(const std::map<int, double>& per_class_acc,
                                          const std::vector<int>& init_class_ids,
                                          const Vector& hardness_scores) {
  if (init_class_ids.empty()) throw RuntimeError("hardness_bias_metrics: no initial classes");
  std::vector<double> accs;
  HardnessBias out;
  double best_h = -std::numeric_limits<double>::infinity();
  for (int c : init_class_ids) {
    const auto it = per_class_acc.find(c);
    if (it == per_class_acc.end()) throw DataError("hardness_bias_metrics: missing accuracy for class " + std::to_string(c));
    if (c < 0 || c >= hardness_scores.size()) throw DataError("hardness_bias_metrics: missing hardness for class " + std::to_string(c));
    accs.push_back(it->second);
    if (hardness_scores(c) > best_h) {
      best_h = hardness_scores(c);
      out.hardest_class = c;
      out.acc_h = it->second;
    }
  }
  double mean = 0.0;
  for (double a : accs) mean += a;
  mean /= static_cast<double>(accs.size());
  for (double a : accs) out.var0 += (a - mean) * (a - mean);
  out.var0 /= static_cast<double>(accs.size());
  return out;
}

}  // namespace cgcd
