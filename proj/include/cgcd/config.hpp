#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "data_io.hpp"
#include "error.hpp"
#include "pipeline.hpp"

namespace cgcd {

/// Everything a run needs besides the data: one JSON document with the
/// sections seed, synthetic, plan, hyper, mode and kmeans.
struct RunConfig {
  std::uint64_t seed = 0;
  SyntheticSpec synthetic;
  StagePlan plan;
  HyperParams hyper;
  RunOptions mode;
  int threads = 1;
};

namespace detail {

inline void reject_unknown(const Json& obj, const std::string& section, const std::set<std::string>& allowed) {
  if (!obj.is_object()) throw ConfigError((section.empty() ? std::string("config") : section) + " must be a JSON object");
  for (const auto& [key, value] : obj.items()) {
    if (!allowed.count(key)) {
      throw ConfigError("unknown config key '" + (section.empty() ? key : section + "." + key) + "'");
    }
  }
}

template <class T>
void read_field(const Json& obj, const std::string& section, const char* key, T& out) {
  const auto it = obj.find(key);
  if (it == obj.end()) return;
  try {
    out = it->template get<T>();
  } catch (const Json::exception&) {
    throw ConfigError("config key '" + section + "." + key + "' has the wrong type");
  }
}

inline void read_on_off(const Json& obj, const std::string& section, const char* key, bool& out) {
  const auto it = obj.find(key);
  if (it == obj.end()) return;
  if (it->is_boolean()) {
    out = it->get<bool>();
  } else if (it->is_string() && (*it == "on" || *it == "off")) {
    out = *it == "on";
  } else {
    throw ConfigError("config key '" + section + "." + key + "' must be true/false or \"on\"/\"off\"");
  }
}

}  // namespace detail

inline RunConfig parse_run_config(const Json& doc) {
  using detail::read_field;
  RunConfig c;
  detail::reject_unknown(doc, "", {"seed", "synthetic", "plan", "hyper", "mode", "kmeans", "threads"});
  read_field(doc, "", "seed", c.seed);
  read_field(doc, "", "threads", c.threads);
  if (c.threads < 1) throw ConfigError("config key 'threads' must be >= 1");

  if (doc.contains("synthetic")) {
    const Json& s = doc["synthetic"];
    detail::reject_unknown(s, "synthetic",
                           {"k_total", "d", "samples_per_class", "angular_margin_deg", "noise_scale", "max_attempts"});
    read_field(s, "synthetic", "k_total", c.synthetic.k_total);
    read_field(s, "synthetic", "d", c.synthetic.d);
    read_field(s, "synthetic", "samples_per_class", c.synthetic.samples_per_class);
    read_field(s, "synthetic", "angular_margin_deg", c.synthetic.angular_margin_deg);
    read_field(s, "synthetic", "noise_scale", c.synthetic.noise_scale);
    read_field(s, "synthetic", "max_attempts", c.synthetic.max_attempts);
  }

  if (doc.contains("plan")) {
    const Json& p = doc["plan"];
    detail::reject_unknown(p, "plan", {"k_init", "t_total", "k_new", "samples_per_new", "samples_per_old", "test_fraction"});
    read_field(p, "plan", "k_init", c.plan.k_init);
    read_field(p, "plan", "t_total", c.plan.t_total);
    if (p.contains("k_new")) {
      if (p["k_new"].is_number_integer()) {
        c.plan.k_new.assign(static_cast<std::size_t>(std::max(0, c.plan.t_total)), p["k_new"].get<int>());
      } else {
        read_field(p, "plan", "k_new", c.plan.k_new);
      }
    } else {
      c.plan.k_new.assign(static_cast<std::size_t>(std::max(0, c.plan.t_total)), 4);
    }
    read_field(p, "plan", "samples_per_new", c.plan.samples_per_new);
    read_field(p, "plan", "samples_per_old", c.plan.samples_per_old);
    read_field(p, "plan", "test_fraction", c.plan.test_fraction);
  }

  if (doc.contains("hyper")) {
    const Json& h = doc["hyper"];
    detail::reject_unknown(h, "hyper",
                           {"tau_p", "tau_t", "tau_c_sup", "tau_c_self", "tau_h", "lambda0", "lambda1", "lambda2",
                            "lambda3", "lr_init", "lr_cont", "epochs_init", "epochs_cont", "batch_size", "sigma_aug",
                            "n_proto", "d_proj"});
    read_field(h, "hyper", "tau_p", c.hyper.tau_p);
    read_field(h, "hyper", "tau_t", c.hyper.tau_t);
    read_field(h, "hyper", "tau_c_sup", c.hyper.tau_c_sup);
    read_field(h, "hyper", "tau_c_self", c.hyper.tau_c_self);
    read_field(h, "hyper", "tau_h", c.hyper.tau_h);
    read_field(h, "hyper", "lambda0", c.hyper.lambda0);
    read_field(h, "hyper", "lambda1", c.hyper.lambda1);
    read_field(h, "hyper", "lambda2", c.hyper.lambda2);
    read_field(h, "hyper", "lambda3", c.hyper.lambda3);
    read_field(h, "hyper", "lr_init", c.hyper.lr_init);
    read_field(h, "hyper", "lr_cont", c.hyper.lr_cont);
    read_field(h, "hyper", "epochs_init", c.hyper.epochs_init);
    read_field(h, "hyper", "epochs_cont", c.hyper.epochs_cont);
    read_field(h, "hyper", "batch_size", c.hyper.batch_size);
    read_field(h, "hyper", "sigma_aug", c.hyper.sigma_aug);
    read_field(h, "hyper", "n_proto", c.hyper.n_proto);
    read_field(h, "hyper", "d_proj", c.hyper.d_proj);
  }

  if (doc.contains("mode")) {
    const Json& m = doc["mode"];
    detail::reject_unknown(m, "mode", {"k_mode", "k_range", "entropy_reg", "hardness", "kd", "prior_reg", "prior_old_ratio"});
    if (m.contains("k_mode")) {
      const Json& v = m["k_mode"];
      if (v == "known") {
        c.mode.k_mode = KMode::known;
      } else if (v == "estimate") {
        c.mode.k_mode = KMode::estimate;
      } else {
        throw ConfigError("config key 'mode.k_mode' must be \"known\" or \"estimate\"");
      }
    }
    if (m.contains("k_range") && !m["k_range"].is_null()) {
      std::vector<int> range;
      read_field(m, "mode", "k_range", range);
      if (range.size() != 2 || range[0] < 1 || range[1] < range[0]) {
        throw ConfigError("config key 'mode.k_range' must be [lo, hi] with 1 <= lo <= hi");
      }
      c.mode.k_range_lo = range[0];
      c.mode.k_range_hi = range[1];
    }
    detail::read_on_off(m, "mode", "entropy_reg", c.mode.entropy_reg);
    detail::read_on_off(m, "mode", "hardness", c.mode.hardness);
    detail::read_on_off(m, "mode", "kd", c.mode.kd);
    detail::read_on_off(m, "mode", "prior_reg", c.mode.prior_reg);
    if (m.contains("prior_old_ratio") && !m["prior_old_ratio"].is_null()) {
      double r = 0.0;
      read_field(m, "mode", "prior_old_ratio", r);
      if (!(r > 0.0 && r < 1.0)) throw ConfigError("config key 'mode.prior_old_ratio' must be in (0, 1)");
      c.mode.prior_old_ratio = r;
    }
  }

  if (doc.contains("kmeans")) {
    const Json& k = doc["kmeans"];
    detail::reject_unknown(k, "kmeans", {"max_iters", "n_restarts"});
    read_field(k, "kmeans", "max_iters", c.mode.kmeans.max_iters);
    read_field(k, "kmeans", "n_restarts", c.mode.kmeans.n_restarts);
    if (c.mode.kmeans.max_iters < 1 || c.mode.kmeans.n_restarts < 1) {
      throw ConfigError("kmeans.max_iters and kmeans.n_restarts must be >= 1");
    }
  }

  c.synthetic.seed = c.seed;
  c.plan.seed = c.seed;
  c.hyper.seed = c.seed;
  c.hyper.validate();
  c.plan.validate();
  return c;
}

/// Canonical echo of a parsed config; every field, stable key order.
inline Json to_json(const RunConfig& c) {
  Json mode{{"k_mode", c.mode.k_mode == KMode::known ? "known" : "estimate"},
            {"k_range", c.mode.k_range_hi > 0 ? Json::array({c.mode.k_range_lo, c.mode.k_range_hi}) : Json(nullptr)},
            {"entropy_reg", c.mode.entropy_reg},
            {"hardness", c.mode.hardness},
            {"kd", c.mode.kd},
            {"prior_reg", c.mode.prior_reg},
            {"prior_old_ratio", c.mode.prior_old_ratio ? Json(*c.mode.prior_old_ratio) : Json(nullptr)}};
  const HyperParams& h = c.hyper;
  return Json{
      {"seed", c.seed},
      {"threads", c.threads},
      {"synthetic",
       {{"k_total", c.synthetic.k_total},
        {"d", c.synthetic.d},
        {"samples_per_class", c.synthetic.samples_per_class},
        {"angular_margin_deg", c.synthetic.angular_margin_deg},
        {"noise_scale", c.synthetic.noise_scale},
        {"max_attempts", c.synthetic.max_attempts}}},
      {"plan",
       {{"k_init", c.plan.k_init},
        {"t_total", c.plan.t_total},
        {"k_new", c.plan.k_new},
        {"samples_per_new", c.plan.samples_per_new},
        {"samples_per_old", c.plan.samples_per_old},
        {"test_fraction", c.plan.test_fraction}}},
      {"hyper",
       {{"tau_p", h.tau_p},       {"tau_t", h.tau_t},         {"tau_c_sup", h.tau_c_sup},
        {"tau_c_self", h.tau_c_self}, {"tau_h", h.tau_h},     {"lambda0", h.lambda0},
        {"lambda1", h.lambda1},   {"lambda2", h.lambda2},     {"lambda3", h.lambda3},
        {"lr_init", h.lr_init},   {"lr_cont", h.lr_cont},     {"epochs_init", h.epochs_init},
        {"epochs_cont", h.epochs_cont}, {"batch_size", h.batch_size}, {"sigma_aug", h.sigma_aug},
        {"n_proto", h.n_proto},   {"d_proj", h.d_proj}}},
      {"mode", mode},
      {"kmeans", {{"max_iters", c.mode.kmeans.max_iters}, {"n_restarts", c.mode.kmeans.n_restarts}}}};
}

/// Applies "a.b.c=value" to a config document. The value is parsed as JSON
/// when possible, otherwise taken as a string.
inline void apply_override(Json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' must look like key.path=value");
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  Json value = Json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  Json* node = &doc;
  std::size_t start = 0;
  for (;;) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("override '" + assignment + "' has an empty key segment");
    if (!node->is_object()) throw ConfigError("override '" + assignment + "' descends into a non-object");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    if (node->is_null()) *node = Json::object();
    start = dot + 1;
  }
}

/// Maps an ablation "name=on|off" to its mode override.
inline std::string ablation_override(const std::string& spec) {
  static const std::set<std::string> names{"entropy_reg", "hardness", "kd", "prior_reg"};
  const auto eq = spec.find('=');
  const std::string name = spec.substr(0, eq);
  const std::string value = eq == std::string::npos ? "off" : spec.substr(eq + 1);
  if (!names.count(name)) throw ConfigError("unknown ablation '" + name + "' (expected entropy_reg, hardness, kd or prior_reg)");
  if (value != "on" && value != "off") throw ConfigError("ablation '" + name + "' must be on or off");
  return "mode." + name + "=" + (value == "on" ? "true" : "false");
}

inline Json load_config_document(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  Json doc = Json::parse(in, nullptr, false, true);
  if (doc.is_discarded()) throw ConfigError("config " + path.string() + " is not valid JSON");
  return doc;
}

}  // namespace cgcd
