#pragma once

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "clustering.hpp"
#include "core_model.hpp"
#include "data_io.hpp"
#include "discovery.hpp"
#include "error.hpp"
#include "evaluation.hpp"
#include "log.hpp"
#include "numerics.hpp"
#include "report.hpp"
#include "retention.hpp"
#include "rng.hpp"

namespace cgcd {

enum class KMode { known, estimate };

/// Mode switches for one run; defaults are the full method.
struct RunOptions {
  bool entropy_reg = true;
  bool hardness = true;   // hardness-aware replay; uniform sampling when off
  bool kd = true;
  bool prior_reg = false; // replace the inter-group entropy term with the prior-ratio term
  std::optional<double> prior_old_ratio;  // taken from train labels when absent
  KMode k_mode = KMode::known;
  int k_range_lo = 1;
  int k_range_hi = 0;     // 0: twice the stage's planned k_new
  KMeansOptions kmeans;
};

/// One stage's data. k_new is the true number of new classes (0 at Stage-0).
struct StageData {
  FeatureMatrix train;
  FeatureMatrix test;
  int k_new = 0;
};

inline std::vector<StageData> stage_data_from_splits(const CgcdSplits& splits) {
  std::vector<StageData> out;
  for (const StageSplit& s : splits.stages) out.push_back(StageData{s.train, s.test, s.k_new});
  return out;
}

struct RunState {
  ModelState model;
  ModelState prev_model;
  PrototypeStore store;
  LabelSpace label_space;   // model's: heads [0, k_old) old, [k_old, k) new
  LabelSpace true_space;    // ground-truth classes seen so far, for evaluation
  RunReport report;
  std::uint64_t seed = 0;
  int next_stage = 0;
};

// ---------------------------------------------------------------------------
// Model-level objectives.

namespace detail {

// Cross-entropy of one view against integer labels, mean over rows, at tau.
inline double classification_terms(const Matrix& u, const NormalizedRows& z, const NormalizedRows& heads,
                                   const std::vector<int>& labels, double tau, double weight,
                                   const ModelState& model, Matrix& grad_heads_hat, LossValue& out) {
  const Eigen::Index n = u.rows();
  const Matrix p = softmax_rows(head_logits(heads, z.out, tau));
  Matrix gl = p;
  double value = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= model.k()) throw RuntimeError("classification loss: label " + std::to_string(y) + " has no head");
    if (!(p(i, y) > 0.0)) throw RuntimeError("log of zero");
    value -= std::log(p(i, y));
    gl(i, y) -= 1.0;
  }
  value /= static_cast<double>(n);
  gl *= weight / static_cast<double>(n);
  const Matrix gz = logits_backward(heads, z.out, gl, tau, grad_heads_hat);
  adapter_backward(model, u, z, gz, out.grads);
  return value;
}

}  // namespace detail

/// L_cls over both views (averaged) at tau_p.
inline LossValue classification_objective(const Matrix& view1, const Matrix& view2, const std::vector<int>& labels,
                                          const ModelState& model, double tau_p) {
  if (static_cast<Eigen::Index>(labels.size()) != view1.rows() || view1.rows() != view2.rows()) {
    throw RuntimeError("classification_objective: batch size mismatch");
  }
  LossValue out = LossValue::zero(model);
  if (view1.rows() == 0) return out;
  const NormalizedRows heads = normalized_heads(model);
  Matrix ghh = Matrix::Zero(model.k(), model.d());
  const NormalizedRows z1 = adapt_batch(model, view1);
  const NormalizedRows z2 = adapt_batch(model, view2);
  out.value += 0.5 * detail::classification_terms(view1, z1, heads, labels, tau_p, 0.5, model, ghh, out);
  out.value += 0.5 * detail::classification_terms(view2, z2, heads, labels, tau_p, 0.5, model, ghh, out);
  heads_backward(heads, ghh, out.grads);
  return out;
}

/// Contrastive term on the projections of two views. With labels it is the
/// supervised variant, without it the self-supervised one.
inline LossValue contrastive_objective(const Matrix& view1, const Matrix& view2, const std::vector<int>* labels,
                                       const ModelState& model, double tau) {
  LossValue out = LossValue::zero(model);
  const NormalizedRows z1 = adapt_batch(model, view1);
  const NormalizedRows z2 = adapt_batch(model, view2);
  const NormalizedRows h1 = project_batch(model, z1.out);
  const NormalizedRows h2 = project_batch(model, z2.out);
  const ContrastiveLoss c = labels ? supervised_contrastive_loss(h1.out, h2.out, *labels, tau)
                                   : self_supervised_contrastive_loss(h1.out, h2.out, tau);
  out.value = c.value;
  const Matrix gz1 = projection_backward(model, z1.out, h1, c.grad_h, out.grads);
  const Matrix gz2 = projection_backward(model, z2.out, h2, c.grad_h_prime, out.grads);
  adapter_backward(model, view1, z1, gz1, out.grads);
  adapter_backward(model, view2, z2, gz2, out.grads);
  return out;
}

/// L_cls + lambda0 * L_con^l + (1 - lambda0) * L_con^u.
inline LossValue initial_objective(const Matrix& view1, const Matrix& view2, const std::vector<int>& labels,
                                   const ModelState& model, const HyperParams& hp) {
  LossValue out = classification_objective(view1, view2, labels, model, hp.tau_p);
  if (hp.lambda0 != 0.0) out.add_scaled(contrastive_objective(view1, view2, &labels, model, hp.tau_c_sup), hp.lambda0);
  if (hp.lambda0 != 1.0) {
    out.add_scaled(contrastive_objective(view1, view2, nullptr, model, hp.tau_c_self), 1.0 - hp.lambda0);
  }
  return out;
}

/// L_new + L_old + lambda3 * L_con^u on the same pair of augmented views.
inline LossValue happy_objective(const Matrix& view1, const Matrix& view2, const Matrix& batch,
                                 const ReplaySample& replay, const ModelState& model, const ModelState& previous,
                                 const LabelSpace& ls, const HyperParams& hp, const RegularizerOptions& reg = {},
                                 const SharpenedTargets* fixed = nullptr) {
  LossValue out = new_class_objective(view1, view2, model, ls, hp, reg, fixed);
  out.add_scaled(old_class_objective(batch, replay, model, previous, ls, hp), 1.0);
  if (hp.lambda3 != 0.0) {
    out.add_scaled(contrastive_objective(view1, view2, nullptr, model, hp.tau_c_self), hp.lambda3);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training loops.

namespace detail {

// Shuffled mini-batches for one epoch; a trailing single sample joins the
// previous batch so every batch has a contrastive negative.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, int batch_size, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(std::span<std::size_t>(order));
  std::vector<std::vector<std::size_t>> batches;
  const auto bs = static_cast<std::size_t>(batch_size);
  for (std::size_t start = 0; start < n; start += bs) {
    const std::size_t end = std::min(n, start + bs);
    if (end - start == 1 && !batches.empty()) {
      batches.back().push_back(order[start]);
    } else {
      batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                           order.begin() + static_cast<std::ptrdiff_t>(end));
    }
  }
  return batches;
}

inline Matrix gather_rows(const Matrix& x, const std::vector<std::size_t>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(rows[i]));
  return out;
}

inline std::vector<int> stage_record_classes(int from, int to) {
  std::vector<int> ids(static_cast<std::size_t>(std::max(0, to - from)));
  std::iota(ids.begin(), ids.end(), from);
  return ids;
}

inline std::vector<double> to_std(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

}  // namespace detail

/// Supervised Stage-0: trains all parameters, then builds prototypes from the
/// ground-truth labels, the shared radius and the initial hardness.
inline RunState train_stage0(const FeatureMatrix& data, int k_init, const HyperParams& hp) {
  hp.validate();
  if (k_init < 2) throw ConfigError("plan.k_init must be >= 2 to train Stage-0");
  data.validate(1e-5, k_init);
  if (!data.has_labels()) throw DataError("stage 0: training data carries no labels");
  std::vector<int> counts(static_cast<std::size_t>(k_init), 0);
  for (int y : data.labels) {
    if (y < 0) throw DataError("stage 0: every training row needs a label");
    ++counts[static_cast<std::size_t>(y)];
  }
  for (int c = 0; c < k_init; ++c) {
    if (counts[static_cast<std::size_t>(c)] == 0) throw DataError("stage 0: class " + std::to_string(c) + " has no samples");
    if (counts[static_cast<std::size_t>(c)] < 2) {
      log::warn("stage 0: class ", c, " has fewer than 2 samples; its contrastive positives may be empty");
    }
  }

  RunState st;
  st.seed = hp.seed;
  Rng init_rng = make_stream(hp.seed, Stream::init);
  st.model = ModelState::initial(data.data.cols(), hp.d_proj, k_init, init_rng);
  st.label_space = LabelSpace::initial(k_init);
  st.true_space = st.label_space;

  for (int e = 0; e < hp.epochs_init; ++e) {
    const ScheduleState sched{hp.lr_init, hp.epochs_init, e};
    Rng shuffle_rng = make_stream(hp.seed, Stream::shuffle, 0, static_cast<std::uint64_t>(e));
    Rng augment_rng = make_stream(hp.seed, Stream::augment, 0, static_cast<std::uint64_t>(e));
    double epoch_loss = 0.0;
    for (const auto& idx : detail::epoch_batches(data.rows(), hp.batch_size, shuffle_rng)) {
      const Matrix u = detail::gather_rows(data.data, idx);
      std::vector<int> y(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) y[i] = data.labels[idx[i]];
      const Matrix v1 = feature_augment_batch(u, hp.sigma_aug, augment_rng);
      const Matrix v2 = feature_augment_batch(u, hp.sigma_aug, augment_rng);
      const LossValue loss = initial_objective(v1, v2, y, st.model, hp);
      epoch_loss += loss.value;
      sgd_step(st.model, loss.grads, sched);
    }
    log::debug("stage 0 epoch ", e, " loss ", epoch_loss);
  }

  const NormalizedRows z = adapt_batch(st.model, data.data);
  const NormalizedRows heads = normalized_heads(st.model);
  const PrototypeEstimate est =
      estimate_prototypes(z.out, data.labels, detail::stage_record_classes(0, k_init), heads.out);
  st.store.prototypes = est.prototypes;
  st.store.source_stage.assign(static_cast<std::size_t>(k_init), 0);
  st.store.radius = shared_radius(z.out, data.labels, k_init);
  st.store.tau_h = hp.tau_h;
  refresh_hardness(st.store);
  st.prev_model = st.model;
  st.next_stage = 1;
  return st;
}

struct ContinualStageInfo {
  int k_new_used = 0;
  std::optional<ClassCountEstimate> estimate;
};

/// One unsupervised continual stage. `k_new_planned` is the known class count
/// (or the estimation hint in estimate mode).
inline ContinualStageInfo train_continual_stage(RunState& st, const FeatureMatrix& data, int k_new_planned,
                                                const HyperParams& hp, const RunOptions& opts = {}) {
  hp.validate();
  const int t = st.next_stage;
  if (t < 1) throw RuntimeError("continual stage requires a trained Stage-0");
  if (k_new_planned < 1) throw ConfigError("k_new must be >= 1 at a continual stage");
  data.validate(1e-5);
  if (data.data.cols() != st.model.d_in()) {
    throw DataError("stage " + std::to_string(t) + ": embedding dimension " + std::to_string(data.data.cols()) +
                    " does not match the model's " + std::to_string(st.model.d_in()));
  }
  const LabelSpace prev_space = st.label_space;
  ContinualStageInfo info;

  const NormalizedRows z0 = adapt_batch(st.model, data.data);
  int k_new = k_new_planned;
  if (opts.k_mode == KMode::estimate) {
    const int hi = opts.k_range_hi > 0 ? opts.k_range_hi : 2 * k_new_planned;
    info.estimate = estimate_new_class_count(z0.out, prev_space.k(), opts.k_range_lo, hi,
                                             make_stream(st.seed, Stream::kmeans, static_cast<std::uint64_t>(t), 1).next(),
                                             opts.kmeans);
    k_new = info.estimate->k_new;
    log::info("stage ", t, ": estimated k_new = ", k_new, " (planned ", k_new_planned, ")");
  }
  info.k_new_used = k_new;
  const LabelSpace ls = prev_space.next(k_new);
  if (ls.k() > static_cast<int>(data.rows())) {
    throw DataError("stage " + std::to_string(t) + ": " + std::to_string(data.rows()) + " samples cannot form " +
                    std::to_string(ls.k()) + " clusters");
  }

  RegularizerOptions reg;
  reg.kind = opts.entropy_reg ? RegularizerKind::soft_entropy : RegularizerKind::none;
  if (opts.entropy_reg && opts.prior_reg) {
    reg.kind = RegularizerKind::prior_ratio;
    double old_ratio = 0.0;
    if (opts.prior_old_ratio) {
      old_ratio = *opts.prior_old_ratio;
    } else {
      if (!data.has_labels()) throw ConfigError("mode.prior_reg needs mode.prior_old_ratio when stage data is unlabelled");
      std::size_t old_n = 0, known = 0;
      for (int y : data.labels) {
        if (y < 0) continue;
        ++known;
        if (y < st.true_space.k()) ++old_n;
      }
      if (known == 0) throw ConfigError("mode.prior_reg needs mode.prior_old_ratio when stage data is unlabelled");
      old_ratio = static_cast<double>(old_n) / static_cast<double>(known);
    }
    if (!(old_ratio > 0.0 && old_ratio < 1.0)) throw ConfigError("mode.prior_old_ratio must be in (0, 1)");
    reg.gt_old = old_ratio;
    reg.gt_new = 1.0 - old_ratio;
  }

  // clustering-guided initialization of the new heads
  const ClusteringResult km = spherical_kmeans(
      z0.out, ls.k(), make_stream(st.seed, Stream::kmeans, static_cast<std::uint64_t>(t), 0).next(), opts.kmeans);
  const GuidedInit init = clustering_guided_init(km.centroids, normalized_heads(st.model).out, k_new);
  ModelState& model = st.model;
  const Eigen::Index k_prev = model.k();
  model.heads.conservativeResize(ls.k(), Eigen::NoChange);
  model.heads.bottomRows(k_new) = init.heads;
  model.stage = t;
  const ModelState& previous = st.prev_model;

  HyperParams hpe = hp;
  if (!opts.kd) hpe.lambda2 = 0.0;
  const SamplingMode mode = opts.hardness ? SamplingMode::hardness : SamplingMode::uniform;

  for (int e = 0; e < hp.epochs_cont; ++e) {
    const ScheduleState sched{hp.lr_cont, hp.epochs_cont, e};
    const auto ts = static_cast<std::uint64_t>(t);
    const auto es = static_cast<std::uint64_t>(e);
    Rng shuffle_rng = make_stream(st.seed, Stream::shuffle, ts, es);
    Rng augment_rng = make_stream(st.seed, Stream::augment, ts, es);
    Rng replay_rng = make_stream(st.seed, Stream::replay, ts, es);
    double epoch_loss = 0.0;
    for (const auto& idx : detail::epoch_batches(data.rows(), hp.batch_size, shuffle_rng)) {
      const Matrix u = detail::gather_rows(data.data, idx);
      const Matrix v1 = feature_augment_batch(u, hpe.sigma_aug, augment_rng);
      const Matrix v2 = feature_augment_batch(u, hpe.sigma_aug, augment_rng);
      const ReplaySample replay = sample_replay_features(st.store, hpe.n_proto, replay_rng, mode);
      const LossValue loss = happy_objective(v1, v2, u, replay, model, previous, ls, hpe, reg);
      epoch_loss += loss.value;
      sgd_step(model, loss.grads, sched);
    }
    log::debug("stage ", t, " epoch ", e, " loss ", epoch_loss);
  }

  // new-class prototypes from the model's own predictions
  const NormalizedRows z = adapt_batch(model, data.data);
  const NormalizedRows heads = normalized_heads(model);
  const std::vector<int> pred = argmax_rows(head_logits(heads, z.out, hp.tau_p));
  const PrototypeEstimate est =
      estimate_prototypes(z.out, pred, detail::stage_record_classes(static_cast<int>(k_prev), ls.k()), heads.out);
  const Eigen::Index old_rows = st.store.prototypes.rows();
  st.store.prototypes.conservativeResize(old_rows + est.prototypes.rows(), Eigen::NoChange);
  st.store.prototypes.bottomRows(est.prototypes.rows()) = est.prototypes;
  st.store.source_stage.insert(st.store.source_stage.end(), static_cast<std::size_t>(k_new), t);
  refresh_hardness(st.store);

  st.prev_model = model;
  st.label_space = ls;
  st.true_space = st.true_space.next(k_new_planned);
  st.next_stage = t + 1;
  return info;
}

struct StageEvaluation {
  StageEval eval;
  Matrix probs;
};

/// Hungarian accuracy of `model` on labelled test data. `truth` describes the
/// true classes; the model may carry a different number of heads.
inline StageEvaluation evaluate_stage(const ModelState& model, const FeatureMatrix& test, const LabelSpace& truth,
                                      double tau_p) {
  if (!test.has_labels()) throw DataError("evaluation: test embeddings carry no labels");
  if (test.data.cols() != model.d_in()) throw DataError("evaluation: embedding dimension does not match the model");
  for (int y : test.labels) {
    if (y < 0 || y >= truth.k()) {
      throw DataError("evaluation: label " + std::to_string(y) + " outside the " + std::to_string(truth.k()) +
                      " classes seen so far");
    }
  }
  StageEvaluation out;
  out.probs = predict_proba(model, test.data, tau_p);
  out.eval = hungarian_accuracy(test.labels, argmax_rows(out.probs), truth, static_cast<int>(model.k()));
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints ("CGRS").

inline constexpr char kCheckpointMagic[4] = {'C', 'G', 'R', 'S'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_matrix(ByteWriter& w, const Matrix& m) {
  w.u64(static_cast<std::uint64_t>(m.rows()));
  w.u64(static_cast<std::uint64_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.size(); ++i) w.f64(m.data()[i]);
}

inline void put_vector(ByteWriter& w, const Vector& v) {
  w.u64(static_cast<std::uint64_t>(v.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) w.f64(v(i));
}

inline Matrix get_matrix(ByteReader& r) {
  const std::uint64_t rows = r.u64();
  const std::uint64_t cols = r.u64();
  if (cols != 0 && rows > r.remaining() / 8 / cols) throw DataError("checkpoint: matrix block exceeds file size");
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = r.f64();
  return m;
}

inline Vector get_vector(ByteReader& r) {
  const std::uint64_t n = r.u64();
  if (n > r.remaining() / 8) throw DataError("checkpoint: vector block exceeds file size");
  Vector v(static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = r.f64();
  return v;
}

inline void put_label_space(ByteWriter& w, const LabelSpace& ls) {
  w.i32(ls.stage);
  w.i32(ls.k_init);
  w.i32(ls.k_old);
  w.i32(ls.k_new);
}

inline LabelSpace get_label_space(ByteReader& r) {
  LabelSpace ls;
  ls.stage = r.i32();
  ls.k_init = r.i32();
  ls.k_old = r.i32();
  ls.k_new = r.i32();
  return ls;
}

inline void put_model(ByteWriter& w, const ModelState& m) {
  w.i32(m.stage);
  put_matrix(w, m.adapter_w);
  put_vector(w, m.adapter_b);
  put_matrix(w, m.projection);
  put_matrix(w, m.heads);
}

inline ModelState get_model(ByteReader& r) {
  ModelState m;
  m.stage = r.i32();
  m.adapter_w = get_matrix(r);
  m.adapter_b = get_vector(r);
  m.projection = get_matrix(r);
  m.heads = get_matrix(r);
  const auto d = m.adapter_w.rows();
  if (m.adapter_b.size() != d || m.projection.cols() != d || m.heads.cols() != d) {
    throw DataError("checkpoint: inconsistent model block shapes");
  }
  return m;
}

}  // namespace detail

inline std::vector<char> encode_checkpoint(const RunState& st) {
  detail::ByteWriter w;
  w.raw(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  w.u64(st.seed);
  w.i32(st.next_stage);
  detail::put_label_space(w, st.label_space);
  detail::put_label_space(w, st.true_space);
  detail::put_model(w, st.model);
  detail::put_model(w, st.prev_model);
  detail::put_matrix(w, st.store.prototypes);
  w.u64(st.store.source_stage.size());
  for (int s : st.store.source_stage) w.i32(s);
  w.f64(st.store.radius);
  w.f64(st.store.tau_h);
  detail::put_vector(w, st.store.hardness_scores);
  detail::put_vector(w, st.store.hardness);
  const std::string report = to_json(st.report).dump();
  w.u64(report.size());
  w.raw(report.data(), report.size());
  return w.bytes();
}

inline RunState decode_checkpoint(const std::vector<char>& bytes) {
  detail::ByteReader r(bytes);
  try {
    if (r.str(4) != std::string(kCheckpointMagic, 4)) throw DataError("checkpoint: bad magic (not a CGRS file)");
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion) throw DataError("checkpoint: unsupported version " + std::to_string(version));
    RunState st;
    st.seed = r.u64();
    st.next_stage = r.i32();
    st.label_space = detail::get_label_space(r);
    st.true_space = detail::get_label_space(r);
    st.model = detail::get_model(r);
    st.prev_model = detail::get_model(r);
    st.store.prototypes = detail::get_matrix(r);
    const std::uint64_t n_src = r.u64();
    if (n_src > r.remaining() / 4) throw DataError("checkpoint: source stage block exceeds file size");
    for (std::uint64_t i = 0; i < n_src; ++i) st.store.source_stage.push_back(r.i32());
    st.store.radius = r.f64();
    st.store.tau_h = r.f64();
    st.store.hardness_scores = detail::get_vector(r);
    st.store.hardness = detail::get_vector(r);
    const std::uint64_t len = r.u64();
    if (len > r.remaining()) throw DataError("checkpoint: report block exceeds file size");
    st.report = run_report_from_json(Json::parse(r.str(static_cast<std::size_t>(len))));
    if (r.remaining() != 0) throw DataError("checkpoint: trailing bytes");
    if (st.model.k() != st.label_space.k()) throw DataError("checkpoint: head count does not match label space");
    return st;
  } catch (const Json::exception& e) {
    throw DataError(std::string("checkpoint: corrupt report block: ") + e.what());
  }
}

inline void write_checkpoint(const std::filesystem::path& path, const RunState& st) {
  detail::write_file_bytes(path, encode_checkpoint(st));
}

inline RunState read_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(detail::read_file_bytes(path));
}

inline std::filesystem::path checkpoint_path(const std::filesystem::path& dir, int stage) {
  return dir / ("stage_" + std::to_string(stage) + ".cgrs");
}

// ---------------------------------------------------------------------------
// Full experiment.

struct RunHooks {
  std::optional<std::filesystem::path> checkpoint_dir;
  std::optional<RunState> resume_from;
  std::function<void(int stage, double seconds)> on_stage_done;
};

struct RunResult {
  RunState state;
  std::vector<double> stage_seconds;  // only stages run in this process
};

namespace detail {

inline void finalize_metrics(RunState& st) {
  RunReport& rep = st.report;
  std::vector<double> init_acc, new_acc;
  for (const auto& s : rep.stages) {
    if (s.eval.acc_init) init_acc.push_back(*s.eval.acc_init);
    if (s.eval.stage >= 1 && s.eval.acc_new) new_acc.push_back(*s.eval.acc_new);
  }
  rep.m_f = init_acc.empty() ? std::nullopt : std::optional<double>(forgetting_metric(init_acc));
  rep.m_d = new_acc.empty() ? std::nullopt : std::optional<double>(discovery_metric(new_acc));
  if (!rep.stages.empty()) {
    const StageRecord& last = rep.stages.back();
    std::vector<int> init_ids;
    for (int c = 0; c < st.true_space.k_init; ++c) {
      if (last.eval.per_class_acc.count(c)) init_ids.push_back(c);
    }
    if (!init_ids.empty() && static_cast<int>(last.hardness_scores.size()) >= st.true_space.k_init) {
      const Vector h = Eigen::Map<const Vector>(last.hardness_scores.data(),
                                                static_cast<Eigen::Index>(last.hardness_scores.size()));
      rep.hardness_bias = hardness_bias_metrics(last.eval.per_class_acc, init_ids, h);
    }
  }
}

inline void record_stage(RunState& st, const StageData& data, double tau_p, int k_new_used,
                         const std::optional<ClassCountEstimate>& estimate) {
  StageEvaluation ev = evaluate_stage(st.model, data.test, st.true_space, tau_p);
  StageRecord rec;
  rec.eval = ev.eval;
  rec.k_new_used = k_new_used;
  rec.hardness = to_std(st.store.hardness);
  rec.hardness_scores = to_std(st.store.hardness_scores);
  if (estimate) rec.k_estimate_scores = estimate->scores;
  if (st.true_space.stage == 1 && st.model.k() == st.true_space.k()) {
    st.report.prediction_bias = prediction_bias_metrics(ev.probs, data.test.labels, st.true_space);
  }
  st.report.stages.push_back(std::move(rec));
}

}  // namespace detail

/// Stage-0 then every continual stage, evaluating after each. With a
/// checkpoint directory each finished stage is saved there.
inline RunResult run_experiment(const std::vector<StageData>& stages, int k_init, const HyperParams& hp,
                                const RunOptions& opts, const Json& config_echo, RunHooks hooks = {}) {
  if (stages.empty()) throw ConfigError("run: no stage data");
  RunResult result;
  RunState& st = result.state;
  using clock = std::chrono::steady_clock;
  auto finish_stage = [&](int t, clock::time_point start) {
    const double secs = std::chrono::duration<double>(clock::now() - start).count();
    result.stage_seconds.push_back(secs);
    detail::finalize_metrics(st);
    st.report.complete = st.next_stage >= static_cast<int>(stages.size());
    if (hooks.checkpoint_dir) {
      std::filesystem::create_directories(*hooks.checkpoint_dir);
      write_checkpoint(checkpoint_path(*hooks.checkpoint_dir, t), st);
    }
    if (hooks.on_stage_done) hooks.on_stage_done(t, secs);
    log::info("stage ", t, " done in ", secs, " s, All ", st.report.stages.back().eval.acc_all);
  };

  if (hooks.resume_from) {
    st = std::move(*hooks.resume_from);
    if (st.seed != hp.seed) throw ConfigError("resume: checkpoint seed differs from the configured seed");
    if (st.next_stage > static_cast<int>(stages.size())) throw ConfigError("resume: checkpoint is past the last stage");
  } else {
    const auto start = clock::now();
    st = train_stage0(stages[0].train, k_init, hp);
    st.report.config = config_echo;
    detail::record_stage(st, stages[0], hp.tau_p, 0, std::nullopt);
    finish_stage(0, start);
  }
  st.report.config = config_echo;

  for (int t = st.next_stage; t < static_cast<int>(stages.size()); ++t) {
    const auto start = clock::now();
    const ContinualStageInfo info = train_continual_stage(st, stages[static_cast<std::size_t>(t)].train,
                                                          stages[static_cast<std::size_t>(t)].k_new, hp, opts);
    detail::record_stage(st, stages[static_cast<std::size_t>(t)], hp.tau_p, info.k_new_used, info.estimate);
    finish_stage(t, start);
  }
  st.report.complete = true;
  st.report.error.clear();
  return result;
}

}  // namespace cgcd
