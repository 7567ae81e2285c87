#include <cgcd/cgcd.hpp>

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace cgcd;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitRuntime = 4;

struct CommonArgs {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
};

RunConfig resolve_config(const CommonArgs& args, const std::vector<std::string>& extra_overrides = {}) {
  Json doc = args.config.empty() ? Json::object() : load_config_document(args.config);
  for (const auto& s : args.sets) apply_override(doc, s);
  for (const auto& s : extra_overrides) apply_override(doc, s);
  if (args.seed) doc["seed"] = *args.seed;
  return parse_run_config(doc);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("write failed for " + path.string());
}

Json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  Json j = Json::parse(in, nullptr, false);
  if (j.is_discarded()) throw DataError(path.string() + " is not valid JSON");
  return j;
}

Json class_counts(const FeatureMatrix& fm) {
  std::map<int, int> counts;
  for (int y : fm.labels) ++counts[y];
  Json j = Json::object();
  for (const auto& [c, n] : counts) j[std::to_string(c)] = n;
  return j;
}

int cmd_gen_synthetic(const CommonArgs& args, const std::string& out) {
  const RunConfig cfg = resolve_config(args);
  const FeatureMatrix fm = generate_synthetic_benchmark(cfg.synthetic);
  write_embeddings(out, fm);
  std::cout << "wrote " << fm.rows() << " x " << fm.dim() << " embeddings to " << out << "\n";
  return kExitOk;
}

int cmd_split(const CommonArgs& args, const std::string& embeddings, const std::string& out) {
  const RunConfig cfg = resolve_config(args);
  const FeatureMatrix source = read_embeddings(embeddings);
  const CgcdSplits splits = build_cgcd_splits(source, cfg.plan);
  const fs::path root(out);
  fs::create_directories(root);
  Json stages = Json::array();
  for (std::size_t t = 0; t < splits.stages.size(); ++t) {
    const StageSplit& s = splits.stages[t];
    const fs::path dir = root / ("stage_" + std::to_string(t));
    fs::create_directories(dir);
    write_embeddings(dir / "train.cge", s.train);
    write_embeddings(dir / "test.cge", s.test);
    stages.push_back(Json{{"stage", t},
                          {"k_old", s.k_old},
                          {"k_new", s.k_new},
                          {"train", {{"file", "stage_" + std::to_string(t) + "/train.cge"},
                                     {"samples", s.train.rows()},
                                     {"per_class", class_counts(s.train)}}},
                          {"test", {{"file", "stage_" + std::to_string(t) + "/test.cge"},
                                    {"samples", s.test.rows()},
                                    {"per_class", class_counts(s.test)}}}});
  }
  Json manifest{{"format", "cgcd-split/1"},
                {"k_init", cfg.plan.k_init},
                {"t_total", cfg.plan.t_total},
                {"dim", source.dim()},
                {"class_order", splits.class_order},
                {"plan", to_json(cfg)["plan"]},
                {"seed", cfg.seed},
                {"stages", stages}};
  write_text(root / "manifest.json", manifest.dump(2) + "\n");
  std::cout << "wrote " << splits.stages.size() << " stages to " << root.string() << "\n";
  return kExitOk;
}

struct LoadedStages {
  std::vector<StageData> stages;
  int k_init = 0;
};

LoadedStages load_stage_dir(const fs::path& dir) {
  const Json manifest = read_json_file(dir / "manifest.json");
  if (manifest.value("format", std::string()) != "cgcd-split/1") throw DataError("manifest.json: unknown format");
  LoadedStages out;
  out.k_init = manifest.at("k_init").get<int>();
  for (const Json& s : manifest.at("stages")) {
    StageData sd;
    sd.train = read_embeddings(dir / s.at("train").at("file").get<std::string>());
    sd.test = read_embeddings(dir / s.at("test").at("file").get<std::string>());
    sd.k_new = s.at("k_new").get<int>();
    if (sd.train.rows() != s.at("train").at("samples").get<std::size_t>() ||
        sd.test.rows() != s.at("test").at("samples").get<std::size_t>()) {
      throw DataError("stage " + std::to_string(s.at("stage").get<int>()) + ": file sizes disagree with manifest.json");
    }
    out.stages.push_back(std::move(sd));
  }
  return out;
}

int cmd_run(const CommonArgs& args, const std::string& data_dir, const std::string& out_dir,
            const std::vector<std::string>& ablations, const std::string& resume, int threads) {
  std::vector<std::string> extra;
  for (const auto& a : ablations) extra.push_back(ablation_override(a));
  RunConfig cfg = resolve_config(args, extra);
  if (threads < 1) throw ConfigError("--threads must be >= 1");
  cfg.threads = threads;
  const LoadedStages data = load_stage_dir(data_dir);
  if (data.k_init != cfg.plan.k_init || static_cast<int>(data.stages.size()) != cfg.plan.t_total + 1) {
    throw ConfigError("config plan (k_init " + std::to_string(cfg.plan.k_init) + ", t_total " +
                      std::to_string(cfg.plan.t_total) + ") does not match the data manifest (k_init " +
                      std::to_string(data.k_init) + ", " + std::to_string(data.stages.size() - 1) + " continual stages)");
  }
  const fs::path out(out_dir);
  fs::create_directories(out);
  RunHooks hooks;
  hooks.checkpoint_dir = out / "checkpoints";
  if (!resume.empty()) hooks.resume_from = read_checkpoint(resume);
  Json timings = Json::object();
  hooks.on_stage_done = [&](int stage, double secs) {
    timings["stage_" + std::to_string(stage)] = secs;
    std::cerr << "stage " << stage << " finished in " << secs << " s\n";
  };
  Json echo = to_json(cfg);
  echo.erase("threads");  // execution detail, not part of the experiment

  RunResult result;
  try {
    result = run_experiment(data.stages, data.k_init, cfg.hyper, cfg.mode, echo, hooks);
  } catch (const Error& e) {
    // keep whatever finished; the last checkpoint holds the partial report
    RunReport partial;
    partial.config = echo;
    const fs::path ckpt_dir = out / "checkpoints";
    for (int t = static_cast<int>(data.stages.size()) - 1; t >= 0; --t) {
      if (fs::exists(checkpoint_path(ckpt_dir, t))) {
        partial = read_checkpoint(checkpoint_path(ckpt_dir, t)).report;
        break;
      }
    }
    partial.complete = false;
    partial.error = e.what();
    emit_report(partial, out);
    write_text(out / "timings.json", timings.dump(2) + "\n");
    throw;
  }
  emit_report(result.state.report, out);
  write_text(out / "timings.json", timings.dump(2) + "\n");
  std::cout << accuracy_csv_text(result.state.report);
  return kExitOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& test_file, const std::string& out) {
  const RunState st = read_checkpoint(checkpoint);
  const FeatureMatrix test = read_embeddings(test_file);
  if (!test.has_labels()) throw DataError(test_file + " carries no labels; evaluation needs ground truth");
  for (int y : test.labels) {
    if (y < 0 || y >= st.true_space.k()) {
      throw DataError("label " + std::to_string(y) + " does not fit the checkpoint's " +
                      std::to_string(st.true_space.k()) + " classes (k mismatch between checkpoint and labels)");
    }
  }
  double tau_p = HyperParams{}.tau_p;
  if (st.report.config.contains("hyper")) tau_p = st.report.config["hyper"].value("tau_p", tau_p);
  const StageEvaluation ev = evaluate_stage(st.model, test, st.true_space, tau_p);
  const std::string text = to_json(ev.eval).dump(2) + "\n";
  if (out.empty()) {
    std::cout << text;
  } else {
    write_text(out, text);
  }
  return kExitOk;
}

int exit_code_for(const Error& e) {
  switch (e.kind()) {
    case ErrorKind::config: return kExitConfig;
    case ErrorKind::data: return kExitData;
    case ErrorKind::runtime: return kExitRuntime;
  }
  return kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Continual generalized category discovery over embedding files"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "cgcd 1.0");

  CommonArgs common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "JSON run config (defaults are used when omitted)");
    sub->add_option("--set", common.sets, "Override a config key, e.g. --set hyper.lr_cont=0.1 (repeatable)");
    sub->add_option("--seed", common.seed, "Override the config seed");
  };

  std::string out, embeddings, data_dir, resume, checkpoint, test_file;
  std::vector<std::string> ablations;
  int threads = 1;

  CLI::App* gen = app.add_subcommand("gen-synthetic", "Generate the synthetic embedding benchmark");
  add_common(gen);
  gen->add_option("--out", out, "Output embedding file (.cge)")->required();

  CLI::App* split = app.add_subcommand("split", "Build per-stage train/test files from labelled embeddings");
  add_common(split);
  split->add_option("--embeddings", embeddings, "Labelled source embedding file")->required()->check(CLI::ExistingFile);
  split->add_option("--out", out, "Output directory (stage_<t>/ plus manifest.json)")->required();

  CLI::App* run = app.add_subcommand("run", "Train Stage-0 and every continual stage, write report and checkpoints");
  add_common(run);
  run->add_option("--data", data_dir, "Directory written by split")->required()->check(CLI::ExistingDirectory);
  run->add_option("--out", out, "Run directory for report.json, accuracy.csv, timings.json, checkpoints/")->required();
  run->add_option("--ablate", ablations, "Toggle a component: entropy_reg|hardness|kd|prior_reg=on|off (repeatable)");
  run->add_option("--resume", resume, "Continue from a stage checkpoint (.cgrs)")->check(CLI::ExistingFile);
  run->add_option("--threads", threads, "Worker cap; results do not depend on it");

  CLI::App* eval = app.add_subcommand("eval", "Evaluate a checkpoint on labelled test embeddings");
  eval->add_option("--checkpoint", checkpoint, "Stage checkpoint (.cgrs)")->required()->check(CLI::ExistingFile);
  eval->add_option("--test", test_file, "Labelled test embeddings (.cge)")->required()->check(CLI::ExistingFile);
  eval->add_option("--out", out, "Write the StageEval JSON here instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (*gen) return cmd_gen_synthetic(common, out);
    if (*split) return cmd_split(common, embeddings, out);
    if (*run) return cmd_run(common, data_dir, out, ablations, resume, threads);
    if (*eval) return cmd_eval(checkpoint, test_file, out);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const Json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitRuntime;
}
