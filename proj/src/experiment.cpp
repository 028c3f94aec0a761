#include "fsda/experiment.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "fsda/image_io.hpp"

namespace fsda {

namespace fs = std::filesystem;

TrainConfig ExperimentConfig::default_toy_train_config() {
  TrainConfig t;
  t.epochs = 20;
  t.crop_height = 64;
  t.crop_width = 64;
  t.base_lr = 0.01;
  t.momentum = 0.9;
  t.lr_power = 0.9;
  t.alpha = 0.2;
  t.temperature = 20.0;
  t.seed = 3;
  t.few_shot_epochs = 200;
  return t;
}

void ExperimentConfig::validate() const {
  encoder.validate();
  train.validate();
  if (n_source < 1 || n_target_val < 1 || n_target <= n_target_val) {
    throw std::invalid_argument("need n_source >= 1 and n_target > n_target_val >= 1");
  }
  if (source.n_class != target.n_class) throw std::invalid_argument("source and target class counts differ");
  for (const auto& extra : extra_sources) {
    if (extra.n_class != source.n_class) throw std::invalid_argument("extra source class count differs");
  }
  if (source.palette == target.palette) {
    throw std::invalid_argument("source and target palettes are identical: no domain shift");
  }
  if (k_shot < 1) throw std::invalid_argument("k_shot must be >= 1");
  for (int c : private_classes) {
    if (c < 0 || c >= source.n_class) throw std::invalid_argument("private class out of range");
  }
  if (scenario == Scenario::kOsda && private_classes.empty()) {
    throw std::invalid_argument("open-set scenario needs private_classes");
  }
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = nlohmann::json{{"source", c.source},
                     {"target", c.target},
                     {"extra_sources", c.extra_sources},
                     {"n_source", c.n_source},
                     {"n_target", c.n_target},
                     {"n_target_val", c.n_target_val},
                     {"encoder", c.encoder},
                     {"train", c.train},
                     {"init_seed", c.init_seed},
                     {"k_shot", c.k_shot},
                     {"support_seed", c.support_seed},
                     {"scenario", to_string(c.scenario)},
                     {"private_classes", c.private_classes},
                     {"alpha_grid", c.alpha_grid},
                     {"k_shot_grid", c.k_shot_grid},
                     {"run_baselines", c.run_baselines},
                     {"unseen_support_groups", c.unseen_support_groups},
                     {"class_subsets", c.class_subsets}};
}

namespace {

// Nested objects may be partial; unspecified keys keep the experiment defaults.
template <typename T>
T merged(const nlohmann::json& j, const char* key, const T& defaults) {
  if (!j.contains(key)) return defaults;
  nlohmann::json base = defaults;
  base.merge_patch(j.at(key));
  return base.get<T>();
}

}  // namespace

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  const ExperimentConfig d;
  c.source = merged(j, "source", d.source);
  c.target = merged(j, "target", d.target);
  c.extra_sources = j.value("extra_sources", d.extra_sources);
  c.n_source = j.value("n_source", d.n_source);
  c.n_target = j.value("n_target", d.n_target);
  c.n_target_val = j.value("n_target_val", d.n_target_val);
  c.encoder = merged(j, "encoder", d.encoder);
  c.train = merged(j, "train", d.train);
  c.init_seed = j.value("init_seed", d.init_seed);
  c.k_shot = j.value("k_shot", d.k_shot);
  c.support_seed = j.value("support_seed", d.support_seed);
  c.scenario = scenario_from_string(j.value("scenario", to_string(d.scenario)));
  c.private_classes = j.value("private_classes", d.private_classes);
  c.alpha_grid = j.value("alpha_grid", d.alpha_grid);
  c.k_shot_grid = j.value("k_shot_grid", d.k_shot_grid);
  c.run_baselines = j.value("run_baselines", d.run_baselines);
  c.unseen_support_groups = j.value("unseen_support_groups", d.unseen_support_groups);
  c.class_subsets = j.value("class_subsets", d.class_subsets);
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config " + path);
  try {
    return nlohmann::json::parse(in).get<ExperimentConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(path + ": " + e.what());
  }
}

std::string config_hash(const ExperimentConfig& config) { return sha256_hex(nlohmann::json(config).dump()); }

// ---------------------------------------------------------------------------
// Data

ExperimentData generate_experiment_data(const ExperimentConfig& config) {
  config.validate();
  ExperimentData data;
  data.n_class = config.source.n_class;
  data.source = generate_synthetic_domain(config.source, config.n_source);
  for (const auto& extra : config.extra_sources) {
    Dataset more = generate_synthetic_domain(extra, config.n_source);
    data.source.insert(data.source.end(), std::make_move_iterator(more.begin()), std::make_move_iterator(more.end()));
  }
  Dataset target = generate_synthetic_domain(config.target, config.n_target);
  const auto split = target.end() - config.n_target_val;
  data.target_pool.assign(std::make_move_iterator(target.begin()), std::make_move_iterator(split));
  data.target_val.assign(std::make_move_iterator(split), std::make_move_iterator(target.end()));
  return data;
}

void write_experiment_data(const ExperimentConfig& config, const std::string& directory, bool force) {
  const fs::path root(directory);
  if (fs::exists(root) && !fs::is_empty(root)) {
    if (!force) throw Error(directory + " already exists; pass --force to overwrite");
    fs::remove_all(root);
  }
  const ExperimentData data = generate_experiment_data(config);
  write_dataset((root / "source").string(), data.source, data.n_class);
  write_dataset((root / "target").string(), data.target_pool, data.n_class);
  write_dataset((root / "target_val").string(), data.target_val, data.n_class);
}

ExperimentData load_experiment_data(const std::string& directory) {
  const fs::path root(directory);
  ExperimentData data;
  auto source = load_dataset((root / "source" / "manifest.json").string());
  data.n_class = source.n_class;
  data.source = std::move(source.samples);
  data.target_pool = load_dataset((root / "target" / "manifest.json").string()).samples;
  data.target_val = load_dataset((root / "target_val" / "manifest.json").string()).samples;
  return data;
}

Dataset without_classes(const Dataset& dataset, const std::vector<int>& classes) {
  Dataset out = dataset;
  for (auto& sample : out) {
    for (auto& v : sample.mask.data) {
      if (std::find(classes.begin(), classes.end(), v) != classes.end()) v = kIgnoreLabel;
    }
  }
  return out;
}

SupportSet without_classes(const SupportSet& support, const std::vector<int>& classes) {
  SupportSet out = support;
  out.samples = without_classes(support.samples, classes);
  return out;
}

// ---------------------------------------------------------------------------
// Runs

FsdaRun run_fsda(const ExperimentConfig& config, const ExperimentData& data, const FitOptions& options) {
  FsdaRun run;
  run.support = construct_support_set(data.target_pool, config.k_shot, data.n_class, config.support_seed);
  const Model initial(config.encoder, 0, config.init_seed);
  if (config.scenario == Scenario::kOsda) {
    const Dataset source = without_classes(data.source, config.private_classes);
    const SupportSet support = without_classes(run.support, config.private_classes);
    FitResult fitted = fit(initial, source, support, config.train, options);
    run.model = std::move(fitted.model);
    run.log = std::move(fitted.log);
  } else {
    FitResult fitted = fit(initial, data.source, run.support, config.train, options);
    run.model = std::move(fitted.model);
    run.log = std::move(fitted.log);
  }
  // Test-time prototypes always come from the full, clean support annotations.
  run.bank = build_bank(run.model, run.support.samples,
                        "support k=" + std::to_string(config.k_shot) + " seed=" + std::to_string(config.support_seed));
  run.report = evaluate(run.model, run.bank, data.target_val, data.n_class, config.scenario, config.class_subsets);
  return run;
}

EvalReport run_source_only(const ExperimentConfig& config, const ExperimentData& data, const FitOptions& options) {
  const Model initial(config.encoder, data.n_class, config.init_seed);
  const FitResult fitted = train_baseline(initial, data.source, config.train, BaselineMode::kSourceOnly, options);
  return evaluate_head(fitted.model, data.target_val, data.n_class, config.class_subsets);
}

EvalReport run_few_shot_only(const ExperimentConfig& config, const ExperimentData& data, const SupportSet& support,
                             const FitOptions& options) {
  const Model initial(config.encoder, data.n_class, config.init_seed);
  const FitResult fitted = train_baseline(initial, support.samples, config.train, BaselineMode::kFewShotOnly, options);
  return evaluate_head(fitted.model, data.target_val, data.n_class, config.class_subsets);
}

namespace {

std::string format_alpha(double alpha) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", alpha);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
  if (!out) throw Error("failed to write " + path.string());
}

template <typename F>
auto stage(const std::string& name, nlohmann::json& provenance, const fs::path& out_dir, F&& body) {
  try {
    return body();
  } catch (const std::exception& e) {
    provenance["failed_stage"] = name;
    provenance["error"] = e.what();
    write_text(out_dir / "provenance.json", provenance.dump(2) + "\n");
    throw StageError(name, e.what());
  }
}

}  // namespace

ExperimentSummary run_experiment(const ExperimentConfig& config, const std::string& out_dir,
                                 const std::string& data_dir, bool force) {
  config.validate();
  const fs::path out(out_dir);
  if (fs::exists(out / "provenance.json") && !force) {
    throw Error(out_dir + " already holds an experiment; pass --force to overwrite");
  }
  fs::create_directories(out);

  nlohmann::json provenance{{"tool", "fsda"},
                            {"version", kVersion},
                            {"config_sha256", config_hash(config)},
                            {"seeds",
                             {{"source", config.source.seed},
                              {"target", config.target.seed},
                              {"init", config.init_seed},
                              {"support", config.support_seed},
                              {"train", config.train.seed}}},
                            {"artifacts", nlohmann::json::object()}};
  write_text(out / "config.json", nlohmann::json(config).dump(2) + "\n");

  const fs::path data_root = data_dir.empty() ? out / "data" : fs::path(data_dir);
  const ExperimentData data = stage("gen-data", provenance, out, [&] {
    if (data_dir.empty()) write_experiment_data(config, data_root.string(), true);
    return load_experiment_data(data_root.string());
  });
  provenance["artifacts"]["data"] = fs::relative(data_root, out).string();

  ExperimentSummary summary;
  const std::vector<int> k_shots = config.k_shot_grid.empty() ? std::vector<int>{config.k_shot} : config.k_shot_grid;
  const std::vector<double> alphas =
      config.alpha_grid.empty() ? std::vector<double>{config.train.alpha} : config.alpha_grid;

  std::map<int, SupportSet> supports;
  for (int k : k_shots) {
    supports[k] = stage("build-support", provenance, out, [&] {
      SupportSet s = construct_support_set(data.target_pool, k, data.n_class, config.support_seed);
      const fs::path path = out / "support" / ("support_k" + std::to_string(k) + ".json");
      save_support_set(path.string(), s, (data_root / "target" / "manifest.json").string());
      provenance["artifacts"]["support_k" + std::to_string(k)] = fs::relative(path, out).string();
      return s;
    });
  }

  for (int k : k_shots) {
    for (double alpha : alphas) {
      ExperimentConfig run_config = config;
      run_config.k_shot = k;
      run_config.train.alpha = alpha;
      const std::string name = "fsda_k" + std::to_string(k) + "_alpha" + format_alpha(alpha);
      const fs::path run_dir = out / name;
      fs::create_directories(run_dir);
      FitOptions options;
      options.log_path = (run_dir / "train_log.ndjson").string();
      options.checkpoint_dir = (run_dir / "checkpoints").string();
      options.dump_path = (run_dir / "nonfinite_dump.json").string();

      const FsdaRun run = stage("fit", provenance, out, [&] { return run_fsda(run_config, data, options); });
      stage("extract-protos", provenance, out, [&] {
        save_checkpoint((run_dir / "model.ckpt").string(), run.model);
        save_bank((run_dir / "bank.bin").string(), run.bank);
        return 0;
      });
      stage("eval", provenance, out, [&] {
        emit_report(run.report, (run_dir / "report.json").string());
        return 0;
      });
      provenance["artifacts"][name] = {{"train_log", fs::relative(run_dir / "train_log.ndjson", out).string()},
                                       {"checkpoint", fs::relative(run_dir / "model.ckpt", out).string()},
                                       {"bank", fs::relative(run_dir / "bank.bin", out).string()},
                                       {"report", fs::relative(run_dir / "report.json", out).string()},
                                       {"alpha", alpha},
                                       {"k_shot", k}};
      summary.reports.emplace_back(name, run.report);

      for (int g = 0; g < config.unseen_support_groups; ++g) {
        stage("eval-unseen", provenance, out, [&] {
          // Support pool without the images used during training.
          Dataset pool;
          for (std::size_t i = 0; i < data.target_pool.size(); ++i) {
            if (std::find(run.support.indices.begin(), run.support.indices.end(), i) == run.support.indices.end()) {
              pool.push_back(data.target_pool[i]);
            }
          }
          const SupportSet unseen = construct_support_set(pool, k, data.n_class, config.support_seed + 1 + g);
          const PrototypeBank bank = build_bank(run.model, unseen.samples, "unseen group " + std::to_string(g));
          const EvalReport report =
              evaluate(run.model, bank, data.target_val, data.n_class, config.scenario, config.class_subsets);
          const std::string unseen_name = name + "_unseen" + std::to_string(g);
          emit_report(report, (run_dir / ("report_unseen" + std::to_string(g) + ".json")).string());
          summary.reports.emplace_back(unseen_name, report);
          return 0;
        });
      }
    }
  }

  if (config.run_baselines) {
    const fs::path base_dir = out / "baselines";
    fs::create_directories(base_dir);
    const EvalReport source_only = stage("baseline-source-only", provenance, out, [&] {
      FitOptions options;
      options.log_path = (base_dir / "source_only_log.ndjson").string();
      return run_source_only(config, data, options);
    });
    emit_report(source_only, (base_dir / "source_only.json").string());
    summary.reports.emplace_back("source_only", source_only);
    for (int k : k_shots) {
      const EvalReport few_shot = stage("baseline-few-shot-only", provenance, out, [&] {
        FitOptions options;
        options.log_path = (base_dir / ("few_shot_only_k" + std::to_string(k) + "_log.ndjson")).string();
        return run_few_shot_only(config, data, supports.at(k), options);
      });
      emit_report(few_shot, (base_dir / ("few_shot_only_k" + std::to_string(k) + ".json")).string());
      summary.reports.emplace_back("few_shot_only_k" + std::to_string(k), few_shot);
    }
  }

  summary.comparison_table = format_comparison_table(summary.reports);
  write_text(out / "comparison.txt", summary.comparison_table);
  nlohmann::json comparison = nlohmann::json::array();
  for (const auto& [name, report] : summary.reports) comparison.push_back({{"run", name}, {"miou", report.miou}});
  write_text(out / "comparison.json", comparison.dump(2) + "\n");
  provenance["artifacts"]["comparison"] = "comparison.txt";
  write_text(out / "provenance.json", provenance.dump(2) + "\n");
  return summary;
}

}  // namespace fsda
