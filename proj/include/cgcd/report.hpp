#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "error.hpp"
#include "evaluation.hpp"

namespace cgcd {

using Json = nlohmann::json;

/// What happened at one stage: evaluation plus the state snapshots worth plotting.
struct StageRecord {
  StageEval eval;
  int k_new_used = 0;                      // heads appended (estimated or given)
  std::vector<double> hardness;            // p_hardness after the stage
  std::vector<double> hardness_scores;     // h_i after the stage
  std::optional<std::vector<double>> k_estimate_scores;  // silhouette per candidate
};

struct RunReport {
  Json config = Json::object();
  std::vector<StageRecord> stages;
  std::optional<double> m_f;
  std::optional<double> m_d;
  std::optional<PredictionBias> prediction_bias;
  std::optional<HardnessBias> hardness_bias;
  bool complete = false;
  std::string error;
};

inline constexpr const char* kReportFormat = "cgcd-report/1";

namespace detail {

template <class T>
Json optional_json(const std::optional<T>& v) {
  return v ? Json(*v) : Json(nullptr);
}

template <class T>
std::optional<T> optional_from(const Json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<T>();
}

}  // namespace detail

inline Json to_json(const StageEval& e) {
  Json per_class = Json::object();
  for (const auto& [c, acc] : e.per_class_acc) per_class[std::to_string(c)] = acc;
  return Json{{"stage", e.stage},
              {"k_old", e.k_old},
              {"k_new", e.k_new},
              {"n_samples", e.n_samples},
              {"n_correct", e.n_correct},
              {"acc_all", e.acc_all},
              {"acc_old", detail::optional_json(e.acc_old)},
              {"acc_new", detail::optional_json(e.acc_new)},
              {"acc_init", detail::optional_json(e.acc_init)},
              {"per_class", per_class},
              {"permutation", e.permutation},
              {"old_heads_fixed", e.old_heads_fixed}};
}

inline StageEval stage_eval_from_json(const Json& j) {
  StageEval e;
  e.stage = j.at("stage").get<int>();
  e.k_old = j.at("k_old").get<int>();
  e.k_new = j.at("k_new").get<int>();
  e.n_samples = j.at("n_samples").get<std::size_t>();
  e.n_correct = j.at("n_correct").get<std::size_t>();
  e.acc_all = j.at("acc_all").get<double>();
  e.acc_old = detail::optional_from<double>(j.at("acc_old"));
  e.acc_new = detail::optional_from<double>(j.at("acc_new"));
  e.acc_init = detail::optional_from<double>(j.at("acc_init"));
  for (const auto& [key, value] : j.at("per_class").items()) e.per_class_acc[std::stoi(key)] = value.get<double>();
  e.permutation = j.at("permutation").get<std::vector<int>>();
  e.old_heads_fixed = j.at("old_heads_fixed").get<bool>();
  return e;
}

inline Json to_json(const StageRecord& r) {
  Json j = to_json(r.eval);
  j["k_new_used"] = r.k_new_used;
  j["hardness"] = r.hardness;
  j["hardness_scores"] = r.hardness_scores;
  j["k_estimate_scores"] = detail::optional_json(r.k_estimate_scores);
  return j;
}

inline StageRecord stage_record_from_json(const Json& j) {
  StageRecord r;
  r.eval = stage_eval_from_json(j);
  r.k_new_used = j.at("k_new_used").get<int>();
  r.hardness = j.at("hardness").get<std::vector<double>>();
  r.hardness_scores = j.at("hardness_scores").get<std::vector<double>>();
  r.k_estimate_scores = detail::optional_from<std::vector<double>>(j.at("k_estimate_scores"));
  return r;
}

inline Json to_json(const RunReport& report) {
  Json stages = Json::array();
  for (const auto& s : report.stages) stages.push_back(to_json(s));
  Json metrics{{"M_f", detail::optional_json(report.m_f)},
               {"M_d", detail::optional_json(report.m_d)},
               {"delta_p", nullptr},
               {"delta_r", nullptr},
               {"var0", nullptr},
               {"acc_h", nullptr},
               {"hardest_class", nullptr}};
  if (report.prediction_bias) {
    metrics["delta_p"] = report.prediction_bias->delta_p;
    metrics["delta_r"] = report.prediction_bias->delta_r;
  }
  if (report.hardness_bias) {
    metrics["var0"] = report.hardness_bias->var0;
    metrics["acc_h"] = report.hardness_bias->acc_h;
    metrics["hardest_class"] = report.hardness_bias->hardest_class;
  }
  return Json{{"format", kReportFormat},
              {"config", report.config},
              {"complete", report.complete},
              {"error", report.error},
              {"stages", stages},
              {"metrics", metrics}};
}

inline RunReport run_report_from_json(const Json& j) {
  if (j.value("format", std::string()) != kReportFormat) throw DataError("not a cgcd report");
  RunReport r;
  r.config = j.at("config");
  r.complete = j.at("complete").get<bool>();
  r.error = j.at("error").get<std::string>();
  for (const auto& s : j.at("stages")) r.stages.push_back(stage_record_from_json(s));
  const Json& m = j.at("metrics");
  r.m_f = detail::optional_from<double>(m.at("M_f"));
  r.m_d = detail::optional_from<double>(m.at("M_d"));
  if (!m.at("delta_p").is_null()) {
    r.prediction_bias = PredictionBias{m.at("delta_p").get<double>(), m.at("delta_r").get<double>()};
  }
  if (!m.at("var0").is_null()) {
    r.hardness_bias = HardnessBias{m.at("var0").get<double>(), m.at("acc_h").get<double>(),
                                   m.at("hardest_class").get<int>()};
  }
  return r;
}

/// Documented key sets; used by tests to reject schema drift.
inline const std::vector<std::string>& report_top_level_keys() {
  static const std::vector<std::string> keys{"complete", "config", "error", "format", "metrics", "stages"};
  return keys;
}
inline const std::vector<std::string>& report_stage_keys() {
  static const std::vector<std::string> keys{
      "acc_all", "acc_init", "acc_new", "acc_old", "hardness", "hardness_scores", "k_estimate_scores",
      "k_new", "k_new_used", "k_old", "n_correct", "n_samples", "old_heads_fixed", "per_class",
      "permutation", "stage"};
  return keys;
}
inline const std::vector<std::string>& report_metric_keys() {
  static const std::vector<std::string> keys{"M_d", "M_f", "acc_h", "delta_p", "delta_r", "hardest_class", "var0"};
  return keys;
}

inline std::string report_json_text(const RunReport& report) { return to_json(report).dump(2) + "\n"; }

inline std::string accuracy_csv_text(const RunReport& report) {
  std::ostringstream os;
  os << "stage,k_old,k_new,all,old,new,init\n";
  os << std::fixed << std::setprecision(2);
  auto cell = [&](const std::optional<double>& v) {
    if (v) os << *v;
  };
  for (const auto& s : report.stages) {
    const StageEval& e = s.eval;
    os << e.stage << ',' << e.k_old << ',' << e.k_new << ',' << e.acc_all << ',';
    cell(e.acc_old);
    os << ',';
    cell(e.acc_new);
    os << ',';
    cell(e.acc_init);
    os << '\n';
  }
  return os.str();
}

/// Writes report.json and accuracy.csv into `dir`.
inline void emit_report(const RunReport& report, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  auto write = [&](const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + p.string());
    out << text;
    if (!out) throw DataError("write failed for " + p.string());
  };
  write(dir / "report.json", report_json_text(report));
  write(dir / "accuracy.csv", accuracy_csv_text(report));
}

inline RunReport read_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  return run_report_from_json(Json::parse(in));
}

}  // namespace cgcd
