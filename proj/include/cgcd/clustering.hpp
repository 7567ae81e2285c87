#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "core_model.hpp"
#include "error.hpp"
#include "rng.hpp"

namespace cgcd {

struct ClusteringResult {
  Matrix centroids;              // K x d, unit rows
  std::vector<int> assignments;  // one cluster id per point
  double inertia = 0.0;          // sum of (1 - c . z)
  std::vector<double> history;   // inertia after each assignment step of the returned restart
  int iterations = 0;
};

struct KMeansOptions {
  int max_iters = 100;
  int n_restarts = 3;
};

namespace detail {

// Assigns each row to the centroid with the largest dot product (ties to the
// lower index). Returns the number of changed assignments and writes inertia.
inline std::size_t assign_points(const Matrix& x, const Matrix& centroids, std::vector<int>& assignments,
                                 std::vector<double>& best_sim, double& inertia) {
  const Matrix sims = x * centroids.transpose();
  std::size_t changed = 0;
  inertia = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < sims.cols(); ++c) {
      if (sims(i, c) > sims(i, best)) best = c;
    }
    const auto idx = static_cast<std::size_t>(i);
    if (assignments[idx] != static_cast<int>(best)) ++changed;
    assignments[idx] = static_cast<int>(best);
    best_sim[idx] = sims(i, best);
    inertia += 1.0 - sims(i, best);
  }
  return changed;
}

// Greedy k-means++ seeding on squared cosine distance: each step draws
// 2 + floor(ln k) candidates by D^2 weight and keeps the one that lowers the
// total potential most.
inline Matrix seed_centroids(const Matrix& x, int k, Rng& rng) {
  const Eigen::Index n = x.rows();
  const int trials = 2 + static_cast<int>(std::log(static_cast<double>(k)));
  Matrix centroids(k, x.cols());
  std::vector<double> dist(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  auto sq_dist = [&](Eigen::Index i, Eigen::Index j) {
    const double d = std::max(0.0, 1.0 - x.row(i).dot(x.row(j)));
    return d * d;
  };
  auto draw = [&](double total) {
    double target = rng.uniform() * total;
    for (Eigen::Index i = 0; i < n; ++i) {
      target -= dist[static_cast<std::size_t>(i)];
      if (target < 0.0) return i;
    }
    return n - 1;
  };

  Eigen::Index pick = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n)));
  centroids.row(0) = x.row(pick);
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    dist[static_cast<std::size_t>(i)] = sq_dist(i, pick);
    total += dist[static_cast<std::size_t>(i)];
  }
  std::vector<double> trial_dist(static_cast<std::size_t>(n)), best_dist(static_cast<std::size_t>(n));
  for (int c = 1; c < k; ++c) {
    if (total <= 0.0) {
      // every point coincides with a chosen centroid
      centroids.row(c) = x.row(static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n))));
      continue;
    }
    double best_total = std::numeric_limits<double>::infinity();
    Eigen::Index best = 0;
    for (int t = 0; t < trials; ++t) {
      const Eigen::Index cand = draw(total);
      double cand_total = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        const auto idx = static_cast<std::size_t>(i);
        trial_dist[idx] = std::min(dist[idx], sq_dist(i, cand));
        cand_total += trial_dist[idx];
      }
      if (cand_total < best_total) {
        best_total = cand_total;
        best = cand;
        best_dist.swap(trial_dist);
      }
    }
    centroids.row(c) = x.row(best);
    dist.swap(best_dist);
    total = best_total;
  }
  return centroids;
}

}  // namespace detail

/// Spherical k-means on unit rows. Best of n_restarts by inertia.
inline ClusteringResult spherical_kmeans(const Matrix& x, int k, std::uint64_t seed,
                                         const KMeansOptions& opts = {}) {
  const Eigen::Index n = x.rows();
  if (k < 1) throw RuntimeError("spherical_kmeans: K must be >= 1");
  if (k > n) throw RuntimeError("spherical_kmeans: K exceeds the number of points");
  ClusteringResult best;
  best.inertia = std::numeric_limits<double>::infinity();
  for (int restart = 0; restart < std::max(1, opts.n_restarts); ++restart) {
    Rng rng(splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(restart) + 1)));
    ClusteringResult run;
    run.centroids = detail::seed_centroids(x, k, rng);
    run.assignments.assign(static_cast<std::size_t>(n), -1);
    std::vector<double> sim(static_cast<std::size_t>(n));
    for (int it = 0; it < std::max(1, opts.max_iters); ++it) {
      double inertia = 0.0;
      const std::size_t changed = detail::assign_points(x, run.centroids, run.assignments, sim, inertia);
      run.inertia = inertia;
      run.history.push_back(inertia);
      run.iterations = it + 1;
      if (changed == 0) break;

      Matrix sums = Matrix::Zero(k, x.cols());
      for (Eigen::Index i = 0; i < n; ++i) sums.row(run.assignments[static_cast<std::size_t>(i)]) += x.row(i);
      std::vector<bool> taken(static_cast<std::size_t>(n), false);
      for (int c = 0; c < k; ++c) {
        const double norm = sums.row(c).norm();
        if (norm > 1e-12) {
          run.centroids.row(c) = sums.row(c) / norm;
          continue;
        }
        // empty (or cancelling) cluster: move it onto the worst-served point
        Eigen::Index far = -1;
        for (Eigen::Index i = 0; i < n; ++i) {
          const auto idx = static_cast<std::size_t>(i);
          if (taken[idx]) continue;
          if (far < 0 || sim[idx] < sim[static_cast<std::size_t>(far)]) far = i;
        }
        taken[static_cast<std::size_t>(far)] = true;
        run.centroids.row(c) = x.row(far);
      }
    }
    if (run.inertia < best.inertia) best = std::move(run);
  }
  return best;
}

/// Mean silhouette with distance 1 - x.y. Singleton clusters contribute 0;
/// a = b = 0 also yields 0. Uses per-cluster sums, O(N K d).
inline double silhouette_score(const Matrix& x, const std::vector<int>& assignments) {
  const Eigen::Index n = x.rows();
  if (static_cast<Eigen::Index>(assignments.size()) != n) {
    throw RuntimeError("silhouette_score: assignment count mismatch");
  }
  int k = 0;
  for (int a : assignments) {
    if (a < 0) throw RuntimeError("silhouette_score: negative cluster id");
    k = std::max(k, a + 1);
  }
  Matrix sums = Matrix::Zero(k, x.cols());
  std::vector<double> counts(static_cast<std::size_t>(k), 0.0);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int c = assignments[static_cast<std::size_t>(i)];
    sums.row(c) += x.row(i);
    counts[static_cast<std::size_t>(c)] += 1.0;
  }
  const auto nonempty = std::count_if(counts.begin(), counts.end(), [](double c) { return c > 0.0; });
  if (nonempty < 2) throw RuntimeError("silhouette_score: need at least two clusters");

  const Matrix dots = x * sums.transpose();
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const int own = assignments[static_cast<std::size_t>(i)];
    const double own_count = counts[static_cast<std::size_t>(own)];
    if (own_count <= 1.0) continue;
    const double self = x.row(i).squaredNorm();
    const double a = std::max(0.0, ((own_count - 1.0) - (dots(i, own) - self)) / (own_count - 1.0));
    double b = std::numeric_limits<double>::infinity();
    for (int c = 0; c < k; ++c) {
      const double cnt = counts[static_cast<std::size_t>(c)];
      if (c == own || cnt == 0.0) continue;
      b = std::min(b, std::max(0.0, (cnt - dots(i, c)) / cnt));
    }
    // below this both distances are rounding noise around zero
    const double denom = std::max(a, b);
    if (denom > 1e-12) total += (b - a) / denom;
  }
  return total / static_cast<double>(n);
}

struct ClassCountEstimate {
  int k_new = 0;
  std::vector<int> candidates;  // k_new values tried
  std::vector<double> scores;   // silhouette per candidate
};

/// Picks k_new in [k_new_lo, k_new_hi] maximizing the silhouette of a
/// (k_old + k_new)-way spherical k-means. Ties go to the smaller k_new.
inline ClassCountEstimate estimate_new_class_count(const Matrix& x, int k_old, int k_new_lo, int k_new_hi,
                                                   std::uint64_t seed, const KMeansOptions& opts = {}) {
  if (k_new_lo > k_new_hi) throw RuntimeError("estimate_new_class_count: empty candidate range");
  ClassCountEstimate est;
  double best = -std::numeric_limits<double>::infinity();
  for (int k_new = k_new_lo; k_new <= k_new_hi; ++k_new) {
    const int k = k_old + k_new;
    if (k < 2 || k > x.rows()) {
      throw RuntimeError("estimate_new_class_count: candidate K = " + std::to_string(k) +
                         " outside [2, N]");
    }
    const ClusteringResult km = spherical_kmeans(x, k, splitmix64(seed ^ static_cast<std::uint64_t>(k)), opts);
    double score = -1.0;
    const auto used = std::set<int>(km.assignments.begin(), km.assignments.end()).size();
    if (used >= 2) score = silhouette_score(x, km.assignments);
    est.candidates.push_back(k_new);
    est.scores.push_back(score);
    if (score > best) {
      best = score;
      est.k_new = k_new;
    }
  }
  return est;
}

struct GuidedInit {
  Matrix heads;                  // k_new x d, unit rows
  std::vector<int> centroid_ids; // which centroids were chosen, by descending score
};

/// Chooses the k_new centroids whose maximum cosine to any old head is
/// smallest. Ties resolve by centroid index.
inline GuidedInit clustering_guided_init(const Matrix& centroids, const Matrix& old_heads, int k_new) {
  const Eigen::Index kc = centroids.rows();
  if (k_new < 0 || k_new > kc) throw RuntimeError("clustering_guided_init: k_new exceeds the number of centroids");
  if (old_heads.rows() > 0 && old_heads.cols() != centroids.cols()) {
    throw RuntimeError("clustering_guided_init: dimension mismatch");
  }
  std::vector<double> score(static_cast<std::size_t>(kc), 0.0);
  if (old_heads.rows() > 0) {
    const Matrix sims = centroids * old_heads.transpose();
    for (Eigen::Index c = 0; c < kc; ++c) score[static_cast<std::size_t>(c)] = -sims.row(c).maxCoeff();
  }
  std::vector<int> order(static_cast<std::size_t>(kc));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return score[static_cast<std::size_t>(a)] > score[static_cast<std::size_t>(b)];
  });
  GuidedInit out;
  out.heads.resize(k_new, centroids.cols());
  for (int j = 0; j < k_new; ++j) {
    out.centroid_ids.push_back(order[static_cast<std::size_t>(j)]);
    out.heads.row(j) = centroids.row(order[static_cast<std::size_t>(j)]);
  }
  return out;
}

}  // namespace cgcd
