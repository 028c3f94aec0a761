// fsda: command-line entry point.
//
// Every subcommand writes a provenance.json into its output directory with
// the command line, the config hash, all seeds and the tool versions.

#include <Eigen/Core>
#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "fsda/experiment.hpp"
#include "fsda/image_io.hpp"

namespace fs = std::filesystem;
using fsda::ExperimentConfig;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CommonOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool force = false;
  std::optional<std::string> scenario;
  std::optional<double> alpha;
  std::optional<int> k_shot;
  std::optional<double> temperature;
};

std::string default_output_root() {
  const char* env = std::getenv("FSDA_OUTPUT_ROOT");
  return env != nullptr && *env != '\0' ? env : "fsda_out";
}

fs::path output_dir(const CommonOptions& o, const std::string& subcommand) {
  return o.out.empty() ? fs::path(default_output_root()) / subcommand : fs::path(o.out);
}

// A single --seed fans out into independent streams for every seeded stage.
void apply_seed(ExperimentConfig& c, std::uint64_t seed) {
  c.source.seed = fsda::derive_seed(seed, 1);
  c.target.seed = fsda::derive_seed(seed, 2);
  for (std::size_t i = 0; i < c.extra_sources.size(); ++i) c.extra_sources[i].seed = fsda::derive_seed(seed, 10 + i);
  c.init_seed = fsda::derive_seed(seed, 3);
  c.support_seed = fsda::derive_seed(seed, 4);
  c.train.seed = fsda::derive_seed(seed, 5);
}

ExperimentConfig resolve_config(const CommonOptions& o) {
  ExperimentConfig c = o.config_path.empty() ? ExperimentConfig{} : fsda::load_experiment_config(o.config_path);
  if (o.seed) apply_seed(c, *o.seed);
  if (o.scenario) c.scenario = fsda::scenario_from_string(*o.scenario);
  if (o.alpha) c.train.alpha = *o.alpha;
  if (o.k_shot) c.k_shot = *o.k_shot;
  if (o.temperature) c.train.temperature = *o.temperature;
  c.validate();
  return c;
}

std::string command_line;

void write_provenance(const fs::path& dir, const std::string& subcommand, const ExperimentConfig& c,
                      nlohmann::json artifacts = nlohmann::json::object()) {
  fs::create_directories(dir);
  nlohmann::json p{{"tool", "fsda"},
                   {"subcommand", subcommand},
                   {"command_line", command_line},
                   {"config_sha256", fsda::config_hash(c)},
                   {"config", c},
                   {"seeds",
                    {{"source", c.source.seed},
                     {"target", c.target.seed},
                     {"init", c.init_seed},
                     {"support", c.support_seed},
                     {"train", c.train.seed}}},
                   {"versions",
                    {{"fsda", fsda::kVersion},
                     {"compiler", __VERSION__},
                     {"eigen",
                      std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                          std::to_string(EIGEN_MINOR_VERSION)},
                     {"nlohmann_json",
                      std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." + std::to_string(NLOHMANN_JSON_VERSION_MINOR) +
                          "." + std::to_string(NLOHMANN_JSON_VERSION_PATCH)}}},
                   {"artifacts", std::move(artifacts)}};
  std::ofstream out(dir / "provenance.json");
  out << p.dump(2) << "\n";
  if (!out) throw fsda::Error("failed to write provenance in " + dir.string());
}

void prepare_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force) throw fsda::Error(dir.string() + " is not empty; pass --force to overwrite");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
}

void add_common(CLI::App* app, CommonOptions& o, bool with_overrides = true) {
  app->add_option("--config", o.config_path, "Experiment config (JSON)")->check(CLI::ExistingFile);
  app->add_option("--seed", o.seed, "Master seed overriding every seed in the config");
  app->add_option("--out", o.out, "Output directory (default: $FSDA_OUTPUT_ROOT/<subcommand>)");
  app->add_flag("--force", o.force, "Overwrite existing output");
  if (!with_overrides) return;
  app->add_option("--scenario", o.scenario, "Evaluation scenario")
      ->check(CLI::IsMember({"standard", "osda", "multi-source"}));
  app->add_option("--alpha", o.alpha, "Weight of the support self-segmentation loss");
  app->add_option("--k-shot", o.k_shot, "Shots per class in the support set")->check(CLI::PositiveNumber);
  app->add_option("--temperature", o.temperature, "Softmax temperature on cosine scores")
      ->check(CLI::PositiveNumber);
}

fs::path manifest_in(const fs::path& data_dir, const std::string& split) {
  return data_dir / split / "manifest.json";
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const CommonOptions& o) {
  const ExperimentConfig c = resolve_config(o);
  const fs::path dir = output_dir(o, "data");
  fsda::write_experiment_data(c, dir.string(), o.force);
  write_provenance(dir, "gen-data", c,
                   {{"source", "source/manifest.json"},
                    {"target", "target/manifest.json"},
                    {"target_val", "target_val/manifest.json"}});
  std::cout << "wrote " << c.n_source * (1 + c.extra_sources.size()) << " source and " << c.n_target
            << " target images to " << dir.string() << "\n";
  return kExitOk;
}

int cmd_build_support(const CommonOptions& o, const std::string& data_dir) {
  const ExperimentConfig c = resolve_config(o);
  const fs::path dir = output_dir(o, "support");
  prepare_dir(dir, o.force);
  const fs::path manifest = manifest_in(data_dir, "target");
  const auto pool = fsda::load_dataset(manifest.string());
  const auto support = fsda::construct_support_set(pool.samples, c.k_shot, pool.n_class, c.support_seed);
  fsda::save_support_set((dir / "support.json").string(), support, fs::absolute(manifest).string());
  write_provenance(dir, "build-support", c, {{"support", "support.json"}});
  std::cout << "support set: " << support.samples.size() << " images";
  if (const auto missing = support.unsaturated(); !missing.empty()) {
    std::cout << " (" << missing.size() << " classes below k_shot)";
  }
  std::cout << "\n";
  return kExitOk;
}

int cmd_train(const CommonOptions& o, const std::string& data_dir, const std::string& support_path) {
  ExperimentConfig c = resolve_config(o);
  const fs::path dir = output_dir(o, "train");
  prepare_dir(dir, o.force);
  fsda::ExperimentData data;
  data.source = fsda::load_dataset(manifest_in(data_dir, "source").string()).samples;
  fsda::SupportSet support = fsda::load_support_set(support_path);
  if (c.scenario == fsda::Scenario::kOsda) {
    data.source = fsda::without_classes(data.source, c.private_classes);
    support = fsda::without_classes(support, c.private_classes);
  }
  fsda::FitOptions options;
  options.log_path = (dir / "train_log.ndjson").string();
  options.checkpoint_dir = (dir / "checkpoints").string();
  options.dump_path = (dir / "nonfinite_dump.json").string();
  const fsda::Model initial(c.encoder, 0, c.init_seed);
  const auto result = fsda::fit(initial, data.source, support, c.train, options);
  fsda::save_checkpoint((dir / "model.ckpt").string(), result.model);
  write_provenance(dir, "train", c,
                   {{"checkpoint", "model.ckpt"}, {"train_log", "train_log.ndjson"}, {"support", support_path}});
  std::cout << "trained " << result.log.records.size() << " steps; checkpoint " << (dir / "model.ckpt").string()
            << "\n";
  return kExitOk;
}

int cmd_train_baseline(const CommonOptions& o, const std::string& data_dir, const std::string& mode,
                       const std::string& support_path) {
  const ExperimentConfig c = resolve_config(o);
  const fs::path dir = output_dir(o, "train-baseline");
  prepare_dir(dir, o.force);
  fsda::Dataset dataset;
  fsda::BaselineMode m;
  int n_class = 0;
  if (mode == "source-only") {
    auto loaded = fsda::load_dataset(manifest_in(data_dir, "source").string());
    dataset = std::move(loaded.samples);
    n_class = loaded.n_class;
    m = fsda::BaselineMode::kSourceOnly;
  } else {
    if (support_path.empty()) throw UsageError("--support is required for the few-shot-only baseline");
    auto support = fsda::load_support_set(support_path);
    dataset = std::move(support.samples);
    n_class = support.n_class;
    m = fsda::BaselineMode::kFewShotOnly;
  }
  fsda::FitOptions options;
  options.log_path = (dir / "train_log.ndjson").string();
  const fsda::Model initial(c.encoder, n_class, c.init_seed);
  const auto result = fsda::train_baseline(initial, dataset, c.train, m, options);
  fsda::save_checkpoint((dir / "model.ckpt").string(), result.model);
  write_provenance(dir, "train-baseline", c, {{"checkpoint", "model.ckpt"}, {"mode", mode}});
  std::cout << "baseline checkpoint " << (dir / "model.ckpt").string() << "\n";
  return kExitOk;
}

int cmd_extract_protos(const CommonOptions& o, const std::string& support_path, const std::string& ckpt,
                       const std::string& bank_out) {
  const ExperimentConfig c = resolve_config(o);
  const fsda::Model model = fsda::load_checkpoint(ckpt);
  const auto support = fsda::load_support_set(support_path);
  const auto bank = fsda::build_bank(model, support.samples, support_path);
  const fs::path out(bank_out);
  if (fs::exists(out) && !o.force) throw fsda::Error(bank_out + " exists; pass --force to overwrite");
  const fs::path dir = out.has_parent_path() ? out.parent_path() : fs::path(".");
  fs::create_directories(dir);
  fsda::save_bank(out.string(), bank);
  write_provenance(dir, "extract-protos", c,
                   {{"bank", out.filename().string()}, {"checkpoint", ckpt}, {"support", support_path}});
  std::cout << "bank with " << bank.class_ids().size() << " prototypes written to " << bank_out << "\n";
  return kExitOk;
}

int cmd_eval(const CommonOptions& o, const std::string& ckpt, const std::string& bank_path,
             const std::string& manifest) {
  const ExperimentConfig c = resolve_config(o);
  const fs::path dir = output_dir(o, "eval");
  prepare_dir(dir, o.force);
  const fsda::Model model = fsda::load_checkpoint(ckpt);
  const auto dataset = fsda::load_dataset(manifest);
  fsda::EvalReport report;
  if (bank_path.empty()) {
    if (model.head_classes() == 0) throw UsageError("--bank is required for a prototype model");
    report = fsda::evaluate_head(model, dataset.samples, dataset.n_class, c.class_subsets);
  } else {
    const auto bank = fsda::load_bank(bank_path, model.output_dim());
    report = fsda::evaluate(model, bank, dataset.samples, dataset.n_class, c.scenario, c.class_subsets);
  }
  fsda::emit_report(report, (dir / "report.json").string());
  write_provenance(dir, "eval", c,
                   {{"report", "report.json"}, {"checkpoint", ckpt}, {"bank", bank_path}, {"manifest", manifest}});
  std::cout << fsda::format_report_table(report);
  return kExitOk;
}

int cmd_segment(const CommonOptions& o, const std::string& ckpt, const std::string& bank_path,
                const std::vector<std::string>& images, bool color) {
  if (images.empty()) throw UsageError("segment needs at least one image");
  const ExperimentConfig c = resolve_config(o);
  const fs::path dir = output_dir(o, "segment");
  fs::create_directories(dir);
  const fsda::Model model = fsda::load_checkpoint(ckpt);
  std::optional<fsda::PrototypeBank> bank;
  if (!bank_path.empty()) bank = fsda::load_bank(bank_path, model.output_dim());
  if (!bank && model.head_classes() == 0) throw UsageError("--bank is required for a prototype model");

  int failures = 0;
  nlohmann::json outputs = nlohmann::json::array();
  for (const auto& path : images) {
    try {
      const auto image = fsda::load_image(path);
      const auto mask = bank ? fsda::segment_image(model, *bank, image) : fsda::segment_image_with_head(model, image);
      const std::string stem = fs::path(path).stem().string();
      const fs::path mask_path = dir / (stem + ".png");
      if (fs::exists(mask_path) && !o.force) throw fsda::Error(mask_path.string() + " exists; pass --force");
      fsda::save_mask(mask_path.string(), mask);
      if (color) fsda::save_color_mask((dir / (stem + "_color.png")).string(), mask);
      outputs.push_back({{"image", path}, {"mask", mask_path.filename().string()}});
    } catch (const std::exception& e) {
      std::cerr << path << ": " << e.what() << "\n";
      ++failures;
    }
  }
  write_provenance(dir, "segment", c, {{"checkpoint", ckpt}, {"bank", bank_path}, {"masks", outputs}});
  return failures == 0 ? kExitOk : kExitFailure;
}

int cmd_run_experiment(const CommonOptions& o, const std::string& data_dir) {
  const ExperimentConfig c = resolve_config(o);
  const fs::path dir = output_dir(o, "experiment");
  const auto summary = fsda::run_experiment(c, dir.string(), data_dir, o.force);
  write_provenance(dir / "cli", "run-experiment", c, {{"experiment", ".."}});
  std::cout << summary.comparison_table;
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  for (int i = 0; i < argc; ++i) command_line += (i ? " " : "") + std::string(argv[i]);

  CLI::App app{"Prototype-based few-shot domain-adaptive semantic segmentation"};
  app.set_version_flag("--version", fsda::kVersion);
  app.require_subcommand(1);

  CommonOptions o;
  std::string data_dir, support_path, ckpt, bank_path, manifest, mode = "source-only";
  std::vector<std::string> images;
  bool color = false;

  auto* gen = app.add_subcommand("gen-data", "Render the synthetic source and target datasets");
  add_common(gen, o, false);

  auto* build = app.add_subcommand("build-support", "Select the k-shot support set from the target pool");
  add_common(build, o);
  build->add_option("--data", data_dir, "Dataset directory from gen-data")->required()->check(CLI::ExistingDirectory);

  auto* train = app.add_subcommand("train", "Episodic prototype training");
  add_common(train, o);
  train->add_option("--data", data_dir, "Dataset directory from gen-data")->required()->check(CLI::ExistingDirectory);
  train->add_option("--support", support_path, "Support set manifest")->required()->check(CLI::ExistingFile);

  auto* baseline = app.add_subcommand("train-baseline", "Train a conventional segmentation baseline");
  add_common(baseline, o);
  baseline->add_option("--data", data_dir, "Dataset directory from gen-data")->check(CLI::ExistingDirectory);
  baseline->add_option("--mode", mode, "Baseline kind")->check(CLI::IsMember({"source-only", "few-shot-only"}));
  baseline->add_option("--support", support_path, "Support set manifest")->check(CLI::ExistingFile);

  auto* extract = app.add_subcommand("extract-protos", "Compute the prototype bank from a support set");
  add_common(extract, o);
  extract->add_option("--support", support_path, "Support set manifest")->required()->check(CLI::ExistingFile);
  extract->add_option("--ckpt", ckpt, "Model checkpoint")->required()->check(CLI::ExistingFile);
  extract->get_option("--out")->description("Output bank file")->required();

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  add_common(eval, o);
  eval->add_option("--ckpt", ckpt, "Model checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--bank", bank_path, "Prototype bank (omit for a baseline head)")->check(CLI::ExistingFile);
  eval->add_option("--manifest", manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);

  auto* segment = app.add_subcommand("segment", "Predict masks for images");
  add_common(segment, o);
  segment->add_option("--ckpt", ckpt, "Model checkpoint")->required()->check(CLI::ExistingFile);
  segment->add_option("--bank", bank_path, "Prototype bank (omit for a baseline head)")->check(CLI::ExistingFile);
  segment->add_flag("--color", color, "Also write a colour visualisation per mask");
  segment->add_option("images", images, "Input images");

  auto* run = app.add_subcommand("run-experiment", "Full pipeline from a single config");
  add_common(run, o);
  run->add_option("--data", data_dir, "Use existing datasets instead of generating them")
      ->check(CLI::ExistingDirectory);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*gen) return cmd_gen_data(o);
    if (*build) return cmd_build_support(o, data_dir);
    if (*train) return cmd_train(o, data_dir, support_path);
    if (*baseline) {
      if (mode == "source-only" && data_dir.empty()) throw UsageError("--data is required for source-only");
      return cmd_train_baseline(o, data_dir, mode, support_path);
    }
    if (*extract) return cmd_extract_protos(o, support_path, ckpt, o.out);
    if (*eval) return cmd_eval(o, ckpt, bank_path, manifest);
    if (*segment) return cmd_segment(o, ckpt, bank_path, images, color);
    if (*run) return cmd_run_experiment(o, data_dir);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n" << app.help();
    return kExitUsage;
  } catch (const fsda::StageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid configuration: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}
