#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "error.hpp"
#include "rng.hpp"

namespace cgcd {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

inline constexpr int kUnlabeled = -1;

/// N x d_in table of unit-norm embeddings, optionally labelled.
struct FeatureMatrix {
  Matrix data;
  std::vector<int> labels;  // empty, or one entry per row; kUnlabeled for unlabelled rows
  std::map<int, std::string> class_names;

  std::size_t rows() const { return static_cast<std::size_t>(data.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(data.cols()); }
  bool has_labels() const { return !labels.empty(); }

  // Throws DataError on a violated invariant. k_total <= 0 skips the label range check.
  void validate(double norm_tol = 1e-6, int k_total = 0) const {
    if (data.rows() < 1) throw DataError("feature matrix has no rows");
    if (data.cols() < 2) throw DataError("feature dimension must be >= 2");
    for (Eigen::Index i = 0; i < data.rows(); ++i) {
      const double n = data.row(i).norm();
      if (!(std::abs(n - 1.0) <= norm_tol)) {
        throw DataError("row " + std::to_string(i) + " is not unit norm (|x| = " +
                        std::to_string(n) + ")");
      }
    }
    if (has_labels()) {
      if (labels.size() != rows()) throw DataError("label count does not match row count");
      for (int y : labels) {
        if (y < kUnlabeled || (k_total > 0 && y >= k_total)) {
          throw DataError("label " + std::to_string(y) + " outside the label space");
        }
      }
    }
  }
};

/// Class bookkeeping at one stage: ids [0, k_old) are old, [k_old, k) are new.
struct LabelSpace {
  int stage = 0;
  int k_init = 0;
  int k_old = 0;
  int k_new = 0;

  int k() const { return k_old + k_new; }
  bool is_old(int c) const { return c >= 0 && c < k_old; }
  bool is_new(int c) const { return c >= k_old && c < k(); }

  // Stage-0: the initial labelled classes are the only classes and count as old.
  static LabelSpace initial(int k_init) { return LabelSpace{0, k_init, k_init, 0}; }

  LabelSpace next(int k_new_next) const {
    if (k_new_next < 1) throw ConfigError("k_new must be >= 1 at a continual stage");
    return LabelSpace{stage + 1, k_init, k(), k_new_next};
  }
};

struct HyperParams {
  double tau_p = 0.1;        // prediction temperature
  double tau_t = 0.05;       // sharpened target temperature
  double tau_c_sup = 0.07;   // supervised contrastive
  double tau_c_self = 1.0;   // self-supervised contrastive
  double tau_h = 0.1;        // hardness softmax
  double lambda0 = 0.35;
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  double lambda3 = 1.0;
  double lr_init = 0.1;
  double lr_cont = 0.01;
  int epochs_init = 100;
  int epochs_cont = 30;
  int batch_size = 128;
  double sigma_aug = 0.05;
  int n_proto = 128;
  int d_proj = 128;
  std::uint64_t seed = 0;

  void validate() const {
    for (auto [name, v] : {std::pair{"tau_p", tau_p}, std::pair{"tau_t", tau_t},
                           std::pair{"tau_c_sup", tau_c_sup}, std::pair{"tau_c_self", tau_c_self},
                           std::pair{"tau_h", tau_h}}) {
      if (!(v > 0.0)) throw ConfigError(std::string("hyper.") + name + " must be > 0");
    }
    if (!(tau_t < tau_p)) throw ConfigError("hyper.tau_t must be smaller than hyper.tau_p");
    if (lambda0 < 0.0 || lambda0 > 1.0) throw ConfigError("hyper.lambda0 must be in [0, 1]");
    if (lr_init < 0.0 || lr_cont < 0.0) throw ConfigError("hyper learning rates must be >= 0");
    if (epochs_init < 0 || epochs_cont < 0) throw ConfigError("hyper epochs must be >= 0");
    if (batch_size < 2) throw ConfigError("hyper.batch_size must be >= 2");
    if (sigma_aug < 0.0) throw ConfigError("hyper.sigma_aug must be >= 0");
    if (n_proto < 0) throw ConfigError("hyper.n_proto must be >= 0");
    if (d_proj < 2) throw ConfigError("hyper.d_proj must be >= 2");
  }
};

/// Trainable parameters: affine adapter, linear projection, classifier heads.
/// Head rows are stored unnormalized and normalized on every forward pass.
struct ModelState {
  Matrix adapter_w;  // d x d_in
  Vector adapter_b;  // d
  Matrix projection; // d_proj x d
  Matrix heads;      // k x d
  int stage = 0;

  Eigen::Index d_in() const { return adapter_w.cols(); }
  Eigen::Index d() const { return adapter_w.rows(); }
  Eigen::Index d_proj() const { return projection.rows(); }
  Eigen::Index k() const { return heads.rows(); }

  // Identity adapter with zero bias, Gaussian projection, random unit heads.
  static ModelState initial(Eigen::Index d_in, Eigen::Index d_proj, Eigen::Index k, Rng& rng) {
    ModelState m;
    m.adapter_w = Matrix::Identity(d_in, d_in);
    m.adapter_b = Vector::Zero(d_in);
    m.projection.resize(d_proj, d_in);
    const double scale = 1.0 / std::sqrt(static_cast<double>(d_in));
    for (Eigen::Index i = 0; i < m.projection.size(); ++i) m.projection.data()[i] = scale * rng.normal();
    m.heads.resize(k, d_in);
    for (Eigen::Index i = 0; i < m.heads.size(); ++i) m.heads.data()[i] = rng.normal();
    for (Eigen::Index i = 0; i < k; ++i) m.heads.row(i).normalize();
    return m;
  }
};

/// Gradient blocks mirroring ModelState.
struct ModelGrads {
  Matrix adapter_w;
  Vector adapter_b;
  Matrix projection;
  Matrix heads;

  static ModelGrads zeros_like(const ModelState& m) {
    return ModelGrads{Matrix::Zero(m.adapter_w.rows(), m.adapter_w.cols()),
                      Vector::Zero(m.adapter_b.size()),
                      Matrix::Zero(m.projection.rows(), m.projection.cols()),
                      Matrix::Zero(m.heads.rows(), m.heads.cols())};
  }

  ModelGrads& add_scaled(const ModelGrads& o, double s) {
    adapter_w += s * o.adapter_w;
    adapter_b += s * o.adapter_b;
    projection += s * o.projection;
    heads += s * o.heads;
    return *this;
  }
};

inline Eigen::Index parameter_count(const ModelState& m) {
  return m.adapter_w.size() + m.adapter_b.size() + m.projection.size() + m.heads.size();
}

// Flat layout: adapter_w, adapter_b, projection, heads (row-major each).
inline Vector flatten(const ModelState& m) {
  Vector v(parameter_count(m));
  Eigen::Index o = 0;
  auto put = [&](const auto& block) {
    v.segment(o, block.size()) = Eigen::Map<const Vector>(block.data(), block.size());
    o += block.size();
  };
  put(m.adapter_w);
  put(m.adapter_b);
  put(m.projection);
  put(m.heads);
  return v;
}

inline Vector flatten(const ModelGrads& g) {
  Vector v(g.adapter_w.size() + g.adapter_b.size() + g.projection.size() + g.heads.size());
  Eigen::Index o = 0;
  auto put = [&](const auto& block) {
    v.segment(o, block.size()) = Eigen::Map<const Vector>(block.data(), block.size());
    o += block.size();
  };
  put(g.adapter_w);
  put(g.adapter_b);
  put(g.projection);
  put(g.heads);
  return v;
}

// Writes a flat vector back into a model with the same shapes as `shape`.
inline ModelState unflatten(const Vector& v, const ModelState& shape) {
  if (v.size() != parameter_count(shape)) throw RuntimeError("unflatten: size mismatch");
  ModelState m = shape;
  Eigen::Index o = 0;
  auto take = [&](auto& block) {
    Eigen::Map<Vector>(block.data(), block.size()) = v.segment(o, block.size());
    o += block.size();
  };
  take(m.adapter_w);
  take(m.adapter_b);
  take(m.projection);
  take(m.heads);
  return m;
}

// ---------------------------------------------------------------------------
// Row normalization with its backward pass.

struct NormalizedRows {
  Matrix out;    // unit rows
  Vector norms;  // pre-normalization norms
};

inline NormalizedRows normalize_rows(Matrix pre, const char* what = "degenerate adapter output") {
  NormalizedRows r;
  r.norms.resize(pre.rows());
  for (Eigen::Index i = 0; i < pre.rows(); ++i) {
    const double n = pre.row(i).norm();
    if (!(n > 0.0) || !std::isfinite(n)) throw RuntimeError(what);
    r.norms(i) = n;
    pre.row(i) /= n;
  }
  r.out = std::move(pre);
  return r;
}

// d(x/|x|) applied to upstream gradients: (g - (g.y) y) / |x| per row.
inline Matrix normalize_rows_backward(const NormalizedRows& fwd, const Matrix& grad_out) {
  Matrix g(grad_out.rows(), grad_out.cols());
  for (Eigen::Index i = 0; i < grad_out.rows(); ++i) {
    const double dot = grad_out.row(i).dot(fwd.out.row(i));
    g.row(i) = (grad_out.row(i) - dot * fwd.out.row(i)) / fwd.norms(i);
  }
  return g;
}

inline Matrix softmax_rows(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    p.row(i) = (logits.row(i).array() - mx).exp();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

// Gradient w.r.t. logits given gradient w.r.t. softmax outputs.
inline Matrix softmax_rows_backward(const Matrix& probs, const Matrix& grad_probs) {
  Matrix g(probs.rows(), probs.cols());
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    const double dot = grad_probs.row(i).dot(probs.row(i));
    g.row(i) = probs.row(i).array() * (grad_probs.row(i).array() - dot);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Batched forward pieces. Rows of U are samples.

inline NormalizedRows adapt_batch(const ModelState& m, const Matrix& u) {
  Matrix pre = u * m.adapter_w.transpose();
  pre.rowwise() += m.adapter_b.transpose();
  return normalize_rows(std::move(pre), "degenerate adapter output");
}

inline NormalizedRows project_batch(const ModelState& m, const Matrix& z) {
  return normalize_rows(z * m.projection.transpose(), "degenerate projection output");
}

inline NormalizedRows normalized_heads(const ModelState& m) {
  if (m.heads.rows() == 0) throw RuntimeError("classifier has no heads");
  return normalize_rows(m.heads, "degenerate classifier head");
}

// Cosine logits divided by the temperature.
inline Matrix head_logits(const NormalizedRows& heads, const Matrix& z, double tau) {
  return (z * heads.out.transpose()) / tau;
}

// Backprop through the adapter; accumulates into grads.
inline void adapter_backward(const ModelState& m, const Matrix& u, const NormalizedRows& z,
                             const Matrix& grad_z, ModelGrads& grads) {
  (void)m;
  const Matrix ga = normalize_rows_backward(z, grad_z);
  grads.adapter_w.noalias() += ga.transpose() * u;
  grads.adapter_b += ga.colwise().sum().transpose();
}

// Backprop through the projection; accumulates dP and returns dL/dz.
inline Matrix projection_backward(const ModelState& m, const Matrix& z, const NormalizedRows& h,
                                  const Matrix& grad_h, ModelGrads& grads) {
  const Matrix gp = normalize_rows_backward(h, grad_h);
  grads.projection.noalias() += gp.transpose() * z;
  return gp * m.projection;
}

// Backprop through logits = z . head_hat / tau. Accumulates dL/d(head_hat)
// into grad_heads_hat and returns dL/dz.
inline Matrix logits_backward(const NormalizedRows& heads, const Matrix& z, const Matrix& grad_logits,
                              double tau, Matrix& grad_heads_hat) {
  grad_heads_hat.noalias() += grad_logits.transpose() * z / tau;
  return grad_logits * heads.out / tau;
}

// Converts the gradient w.r.t. normalized heads into the raw head gradient.
inline void heads_backward(const NormalizedRows& heads, const Matrix& grad_heads_hat, ModelGrads& grads) {
  grads.heads += normalize_rows_backward(heads, grad_heads_hat);
}

// ---------------------------------------------------------------------------
// Single-sample API.

inline Vector adapt(const ModelState& m, const Vector& u) {
  if (u.size() != m.d_in()) throw RuntimeError("adapt: input dimension mismatch");
  Vector pre = m.adapter_w * u + m.adapter_b;
  const double n = pre.norm();
  if (!(n > 0.0)) throw RuntimeError("degenerate adapter output");
  return pre / n;
}

inline Vector classify(const ModelState& m, const Vector& z, double tau) {
  if (m.k() == 0) throw RuntimeError("classify: classifier has no heads");
  if (!(tau > 0.0)) throw RuntimeError("classify: temperature must be > 0");
  const NormalizedRows heads = normalized_heads(m);
  Vector logits = heads.out * z / tau;
  logits.array() -= logits.maxCoeff();
  Vector p = logits.array().exp();
  return p / p.sum();
}

inline Vector project(const ModelState& m, const Vector& z) {
  Vector pre = m.projection * z;
  const double n = pre.norm();
  if (!(n > 0.0)) throw RuntimeError("degenerate projection output");
  return pre / n;
}

// Argmax with ties to the lowest index.
inline std::vector<int> argmax_rows(const Matrix& m) {
  std::vector<int> out(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index j = 1; j < m.cols(); ++j) {
      if (m(i, j) > m(i, best)) best = j;
    }
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

// Class probabilities for raw embeddings.
inline Matrix predict_proba(const ModelState& m, const Matrix& u, double tau) {
  const NormalizedRows z = adapt_batch(m, u);
  return softmax_rows(head_logits(normalized_heads(m), z.out, tau));
}

}  // namespace cgcd
