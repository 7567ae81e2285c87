#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "core_model.hpp"
#include "error.hpp"
#include "log.hpp"
#include "rng.hpp"

namespace cgcd {

// ---------------------------------------------------------------------------
// "CGE1" embedding files.
//
//   magic   4 bytes  "CGE1"
//   version u32      1
//   n       u64      rows
//   d       u32      columns
//   flags   u8       bit0: labels present
//   payload n*d f32  row-major
//   labels  n   i32  when flagged
//
// All integers and floats little-endian. Header is 21 bytes.

inline constexpr char kEmbeddingMagic[4] = {'C', 'G', 'E', '1'};
inline constexpr std::uint32_t kEmbeddingVersion = 1;
inline constexpr std::size_t kEmbeddingHeaderBytes = 21;

enum class EmbeddingErrorCode { io, bad_magic, bad_version, truncated_header, truncated_payload, trailing_bytes, bad_shape };

class EmbeddingFileError : public DataError {
 public:
  EmbeddingFileError(EmbeddingErrorCode code, const std::string& what) : DataError(what), code_(code) {}
  EmbeddingErrorCode code() const noexcept { return code_; }

 private:
  EmbeddingErrorCode code_;
};

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) { put_le(v); }
  void u64(std::uint64_t v) { put_le(v); }
  void i32(std::int32_t v) { put_le(static_cast<std::uint32_t>(v)); }
  void f32(float v) { put_le(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { put_le(std::bit_cast<std::uint64_t>(v)); }
  void raw(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    bytes_.insert(bytes_.end(), c, c + n);
  }
  const std::vector<char>& bytes() const { return bytes_; }

 private:
  template <class U>
  void put_le(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
  }
  std::vector<char> bytes_;
};

class ByteReader {
 public:
  ByteReader(const std::vector<char>& bytes, std::size_t offset = 0) : bytes_(bytes), pos_(offset) {}

  std::size_t remaining() const { return bytes_.size() - pos_; }
  std::size_t position() const { return pos_; }
  bool has(std::size_t n) const { return remaining() >= n; }

  std::uint8_t u8() { return static_cast<std::uint8_t>(take(1)[0]); }
  std::uint32_t u32() { return get_le<std::uint32_t>(); }
  std::uint64_t u64() { return get_le<std::uint64_t>(); }
  std::int32_t i32() { return static_cast<std::int32_t>(get_le<std::uint32_t>()); }
  float f32() { return std::bit_cast<float>(get_le<std::uint32_t>()); }
  double f64() { return std::bit_cast<double>(get_le<std::uint64_t>()); }
  std::string str(std::size_t n) {
    const char* p = take(n);
    return std::string(p, n);
  }

 private:
  const char* take(std::size_t n) {
    if (!has(n)) throw DataError("unexpected end of data");
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  template <class U>
  U get_le() {
    const char* p = take(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<unsigned char>(p[i])) << (8 * i);
    return v;
  }
  const std::vector<char>& bytes_;
  std::size_t pos_;
};

inline std::vector<char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw EmbeddingFileError(EmbeddingErrorCode::io, "cannot open " + path.string());
  return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file_bytes(const std::filesystem::path& path, const std::vector<char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

}  // namespace detail

inline std::vector<char> encode_embeddings(const FeatureMatrix& fm) {
  if (fm.rows() == 0) throw EmbeddingFileError(EmbeddingErrorCode::bad_shape, "refusing to write an empty embedding file (n = 0)");
  if (fm.dim() == 0) throw EmbeddingFileError(EmbeddingErrorCode::bad_shape, "refusing to write zero-dimensional embeddings");
  if (fm.has_labels() && fm.labels.size() != fm.rows()) {
    throw EmbeddingFileError(EmbeddingErrorCode::bad_shape, "label count does not match row count");
  }
  detail::ByteWriter w;
  w.raw(kEmbeddingMagic, 4);
  w.u32(kEmbeddingVersion);
  w.u64(fm.rows());
  w.u32(static_cast<std::uint32_t>(fm.dim()));
  w.u8(fm.has_labels() ? 1 : 0);
  for (Eigen::Index i = 0; i < fm.data.rows(); ++i) {
    for (Eigen::Index j = 0; j < fm.data.cols(); ++j) w.f32(static_cast<float>(fm.data(i, j)));
  }
  if (fm.has_labels()) {
    for (int y : fm.labels) w.i32(y);
  }
  return w.bytes();
}

inline FeatureMatrix decode_embeddings(const std::vector<char>& bytes, double norm_tol = 1e-5) {
  if (bytes.size() < kEmbeddingHeaderBytes) throw EmbeddingFileError(EmbeddingErrorCode::truncated_header, "truncated header");
  if (std::memcmp(bytes.data(), kEmbeddingMagic, 4) != 0) throw EmbeddingFileError(EmbeddingErrorCode::bad_magic, "bad magic (expected CGE1)");
  detail::ByteReader r(bytes, 4);
  const std::uint32_t version = r.u32();
  if (version != kEmbeddingVersion) {
    throw EmbeddingFileError(EmbeddingErrorCode::bad_version, "unsupported version " + std::to_string(version));
  }
  const std::uint64_t n = r.u64();
  const std::uint32_t d = r.u32();
  const std::uint8_t flags = r.u8();
  const bool labelled = (flags & 1u) != 0;
  if (n == 0 || d == 0) throw EmbeddingFileError(EmbeddingErrorCode::bad_shape, "empty embedding matrix");
  const std::uint64_t expected = 4ull * n * d + (labelled ? 4ull * n : 0ull);
  if (r.remaining() < expected) throw EmbeddingFileError(EmbeddingErrorCode::truncated_payload, "truncated payload");
  if (r.remaining() > expected) throw EmbeddingFileError(EmbeddingErrorCode::trailing_bytes, "unexpected trailing bytes");

  FeatureMatrix fm;
  fm.data.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < fm.data.rows(); ++i) {
    for (Eigen::Index j = 0; j < fm.data.cols(); ++j) fm.data(i, j) = static_cast<double>(r.f32());
  }
  if (labelled) {
    fm.labels.resize(n);
    for (auto& y : fm.labels) y = r.i32();
  }
  std::size_t renormalized = 0;
  for (Eigen::Index i = 0; i < fm.data.rows(); ++i) {
    const double norm = fm.data.row(i).norm();
    if (!(norm > 0.0) || !std::isfinite(norm)) {
      throw EmbeddingFileError(EmbeddingErrorCode::bad_shape, "row " + std::to_string(i) + " has zero or non-finite norm");
    }
    if (std::abs(norm - 1.0) > norm_tol) {
      ++renormalized;
      fm.data.row(i) /= norm;
    }
  }
  if (renormalized > 0) log::warn(renormalized, " embedding rows were not unit norm and were renormalized");
  return fm;
}

inline void write_embeddings(const std::filesystem::path& path, const FeatureMatrix& fm) {
  detail::write_file_bytes(path, encode_embeddings(fm));
}

inline FeatureMatrix read_embeddings(const std::filesystem::path& path) {
  return decode_embeddings(detail::read_file_bytes(path));
}

// ---------------------------------------------------------------------------
// Continual split construction.

struct StagePlan {
  int k_init = 20;
  int t_total = 5;
  std::vector<int> k_new{4, 4, 4, 4, 4};  // one entry per continual stage
  int samples_per_new = 200;              // also the Stage-0 per-class count
  int samples_per_old = 25;
  double test_fraction = 0.2;
  std::uint64_t seed = 0;

  int total_classes() const {
    int k = k_init;
    for (int i = 0; i < t_total; ++i) k += k_new[static_cast<std::size_t>(i)];
    return k;
  }

  void validate() const {
    if (k_init < 1) throw ConfigError("plan.k_init must be >= 1");
    if (t_total < 0) throw ConfigError("plan.t_total must be >= 0");
    if (static_cast<int>(k_new.size()) != t_total) throw ConfigError("plan.k_new needs one entry per continual stage");
    for (int k : k_new) {
      if (k < 1) throw ConfigError("plan.k_new entries must be >= 1");
    }
    if (samples_per_new < 1) throw ConfigError("plan.samples_per_new must be >= 1");
    if (samples_per_old < 1) throw ConfigError("plan.samples_per_old must be >= 1");
    if (!(test_fraction >= 0.0 && test_fraction < 1.0)) throw ConfigError("plan.test_fraction must be in [0, 1)");
  }
};

struct StageSplit {
  FeatureMatrix train;
  FeatureMatrix test;
  std::vector<std::size_t> train_rows;  // source row indices
  std::vector<std::size_t> test_rows;
  int k_old = 0;
  int k_new = 0;
};

struct CgcdSplits {
  std::vector<StageSplit> stages;       // stage 0 .. T
  std::vector<int> class_order;         // new id -> source class id
};

/// Builds Stage-0..T train/test sets. Classes are relabelled so that stage
/// order gives contiguous ids: initial classes first, then each stage's new
/// classes. Test rows are reserved per class before any stage assignment.
inline CgcdSplits build_cgcd_splits(const FeatureMatrix& source, const StagePlan& plan) {
  plan.validate();
  if (!source.has_labels()) throw DataError("split: source embeddings carry no labels");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < source.rows(); ++i) {
    if (source.labels[i] >= 0) by_class[source.labels[i]].push_back(i);
  }
  const int needed = plan.total_classes();
  if (static_cast<int>(by_class.size()) < needed) {
    throw DataError("split: plan needs " + std::to_string(needed) + " classes but the source has " +
                    std::to_string(by_class.size()) + " (shortfall " +
                    std::to_string(needed - static_cast<int>(by_class.size())) + ")");
  }
  Rng rng = make_stream(plan.seed, Stream::split);
  std::vector<int> classes;
  for (const auto& [c, rows] : by_class) classes.push_back(c);
  rng.shuffle(std::span<int>(classes));
  classes.resize(static_cast<std::size_t>(needed));

  // per new id: remaining train pool and reserved test rows
  std::vector<std::vector<std::size_t>> pool(static_cast<std::size_t>(needed)), test(static_cast<std::size_t>(needed));
  for (int id = 0; id < needed; ++id) {
    std::vector<std::size_t> rows = by_class[classes[static_cast<std::size_t>(id)]];
    rng.shuffle(std::span<std::size_t>(rows));
    const auto n_test = static_cast<std::size_t>(std::llround(plan.test_fraction * static_cast<double>(rows.size())));
    test[static_cast<std::size_t>(id)].assign(rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(n_test));
    pool[static_cast<std::size_t>(id)].assign(rows.begin() + static_cast<std::ptrdiff_t>(n_test), rows.end());
    // draw from the back; reverse so draws follow the shuffled order
    std::reverse(pool[static_cast<std::size_t>(id)].begin(), pool[static_cast<std::size_t>(id)].end());
  }

  auto draw = [&](int id, int count, std::vector<std::size_t>& rows_out, std::vector<int>& labels_out, int stage) {
    auto& p = pool[static_cast<std::size_t>(id)];
    if (static_cast<int>(p.size()) < count) {
      throw DataError("split: class " + std::to_string(classes[static_cast<std::size_t>(id)]) + " has " +
                      std::to_string(p.size()) + " unused training samples but stage " + std::to_string(stage) +
                      " needs " + std::to_string(count));
    }
    for (int i = 0; i < count; ++i) {
      rows_out.push_back(p.back());
      labels_out.push_back(id);
      p.pop_back();
    }
  };
  auto gather = [&](const std::vector<std::size_t>& rows, const std::vector<int>& labels) {
    FeatureMatrix fm;
    fm.data.resize(static_cast<Eigen::Index>(rows.size()), source.data.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) fm.data.row(static_cast<Eigen::Index>(i)) = source.data.row(static_cast<Eigen::Index>(rows[i]));
    fm.labels = labels;
    for (int id = 0; id < needed; ++id) {
      const auto it = source.class_names.find(classes[static_cast<std::size_t>(id)]);
      if (it != source.class_names.end()) fm.class_names[id] = it->second;
    }
    return fm;
  };

  CgcdSplits out;
  out.class_order = classes;
  int seen = 0;
  for (int t = 0; t <= plan.t_total; ++t) {
    StageSplit st;
    const int k_new = t == 0 ? plan.k_init : plan.k_new[static_cast<std::size_t>(t - 1)];
    st.k_old = t == 0 ? 0 : seen;
    st.k_new = t == 0 ? 0 : k_new;
    std::vector<int> train_labels, test_labels;
    if (t > 0) {
      for (int id = 0; id < seen; ++id) draw(id, plan.samples_per_old, st.train_rows, train_labels, t);
    }
    for (int id = seen; id < seen + k_new; ++id) draw(id, plan.samples_per_new, st.train_rows, train_labels, t);
    seen += k_new;
    if (t == 0) st.k_old = seen;
    for (int id = 0; id < seen; ++id) {
      for (std::size_t r : test[static_cast<std::size_t>(id)]) {
        st.test_rows.push_back(r);
        test_labels.push_back(id);
      }
    }
    st.train = gather(st.train_rows, train_labels);
    if (!st.test_rows.empty()) st.test = gather(st.test_rows, test_labels);
    out.stages.push_back(std::move(st));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic benchmark.

struct SyntheticSpec {
  int k_total = 40;
  int d = 32;
  int samples_per_class = 420;
  double angular_margin_deg = 60.0;
  double noise_scale = 0.15;
  std::uint64_t seed = 0;
  int max_attempts = 100000;

  void validate() const {
    if (d < 2) throw ConfigError("synthetic.d must be >= 2 (got " + std::to_string(d) + ")");
    if (k_total < 1) throw ConfigError("synthetic.k_total must be >= 1");
    if (samples_per_class < 1) throw ConfigError("synthetic.samples_per_class must be >= 1");
    if (!(angular_margin_deg >= 0.0 && angular_margin_deg <= 180.0)) {
      throw ConfigError("synthetic.angular_margin_deg must be in [0, 180]");
    }
    if (noise_scale < 0.0) throw ConfigError("synthetic.noise_scale must be >= 0");
  }
};

inline Vector random_unit(Eigen::Index d, Rng& rng) {
  for (;;) {
    Vector v(d);
    for (Eigen::Index j = 0; j < d; ++j) v(j) = rng.normal();
    const double n = v.norm();
    if (n > 0.0) return v / n;
  }
}

/// Class directions by rejection sampling at the requested pairwise angle,
/// then samples normalize(mu + eps). Rows are grouped by class.
inline FeatureMatrix generate_synthetic_benchmark(const SyntheticSpec& spec, Matrix* directions_out = nullptr) {
  spec.validate();
  Rng rng = make_stream(spec.seed, Stream::synthetic);
  const double max_cos = std::cos(spec.angular_margin_deg * std::numbers::pi / 180.0);
  Matrix directions(spec.k_total, spec.d);
  for (int c = 0; c < spec.k_total; ++c) {
    bool placed = false;
    for (int attempt = 0; attempt < spec.max_attempts && !placed; ++attempt) {
      const Vector v = random_unit(spec.d, rng);
      placed = true;
      for (int p = 0; p < c; ++p) {
        if (directions.row(p).dot(v) > max_cos) {
          placed = false;
          break;
        }
      }
      if (placed) directions.row(c) = v.transpose();
    }
    if (!placed) {
      throw ConfigError("synthetic: cannot place " + std::to_string(spec.k_total) + " directions at " +
                        std::to_string(spec.angular_margin_deg) + " degrees in d = " + std::to_string(spec.d));
    }
  }
  FeatureMatrix fm;
  const Eigen::Index n = static_cast<Eigen::Index>(spec.k_total) * spec.samples_per_class;
  fm.data.resize(n, spec.d);
  fm.labels.resize(static_cast<std::size_t>(n));
  Eigen::Index row = 0;
  for (int c = 0; c < spec.k_total; ++c) {
    for (int s = 0; s < spec.samples_per_class; ++s, ++row) {
      for (;;) {
        Vector v = directions.row(c).transpose();
        if (spec.noise_scale > 0.0) {
          for (Eigen::Index j = 0; j < spec.d; ++j) v(j) += spec.noise_scale * rng.normal();
        }
        const double norm = v.norm();
        if (norm > 0.0) {
          fm.data.row(row) = (v / norm).transpose();
          break;
        }
      }
      fm.labels[static_cast<std::size_t>(row)] = c;
    }
  }
  if (directions_out != nullptr) *directions_out = directions;
  return fm;
}

}  // namespace cgcd
