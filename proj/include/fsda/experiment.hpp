#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fsda/data.hpp"
#include "fsda/evaluation.hpp"
#include "fsda/model.hpp"
#include "fsda/training.hpp"

namespace fsda {

inline constexpr const char* kVersion = "0.1.0";

/// Everything needed to reproduce one experiment from a single file.
struct ExperimentConfig {
  SyntheticDomainSpec source = default_source_spec();
  SyntheticDomainSpec target = default_target_spec();
  std::vector<SyntheticDomainSpec> extra_sources;  // merged into the source domain
  int n_source = 200;
  int n_target = 60;
  int n_target_val = 20;  // held out from the support pool for evaluation

  EncoderConfig encoder;
  TrainConfig train = default_toy_train_config();
  std::uint64_t init_seed = 7;

  int k_shot = 5;
  std::uint64_t support_seed = 11;
  Scenario scenario = Scenario::kStandard;
  std::vector<int> private_classes;  // target-only classes for the open-set scenario

  std::vector<double> alpha_grid;  // empty: train.alpha only
  std::vector<int> k_shot_grid;    // empty: k_shot only
  bool run_baselines = false;
  int unseen_support_groups = 0;   // extra support sets used only for evaluation
  std::map<std::string, std::vector<int>> class_subsets;

  /// Training schedule used for the desk-scale benchmark.
  static TrainConfig default_toy_train_config();

  void validate() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& config);
void from_json(const nlohmann::json& j, ExperimentConfig& config);
ExperimentConfig load_experiment_config(const std::string& path);

struct ExperimentData {
  Dataset source;
  Dataset target_pool;  // support candidates
  Dataset target_val;
  int n_class = 0;
};

/// Renders all domains in memory.
ExperimentData generate_experiment_data(const ExperimentConfig& config);

/// Writes source/, target/ and target_val/ datasets with manifests. Refuses to
/// touch an existing directory unless `force` is set.
void write_experiment_data(const ExperimentConfig& config, const std::string& directory, bool force);
ExperimentData load_experiment_data(const std::string& directory);

/// Masks the given classes to kIgnoreLabel.
Dataset without_classes(const Dataset& dataset, const std::vector<int>& classes);
SupportSet without_classes(const SupportSet& support, const std::vector<int>& classes);

struct FsdaRun {
  SupportSet support;
  Model model;
  TrainingLog log;
  PrototypeBank bank;
  EvalReport report;
};

/// Support construction, episodic training, bank extraction and evaluation.
/// The open-set scenario hides private classes from training only.
FsdaRun run_fsda(const ExperimentConfig& config, const ExperimentData& data, const FitOptions& options = {});

EvalReport run_source_only(const ExperimentConfig& config, const ExperimentData& data, const FitOptions& options = {});
EvalReport run_few_shot_only(const ExperimentConfig& config, const ExperimentData& data, const SupportSet& support,
                             const FitOptions& options = {});

/// Raised by run_experiment with the name of the stage that failed.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what)
      : Error("stage '" + stage + "' failed: " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct ExperimentSummary {
  std::vector<std::pair<std::string, EvalReport>> reports;
  std::string comparison_table;
};

/// Full pipeline with every artifact and a provenance record under out_dir.
/// With data_dir empty the datasets are generated into out_dir/data.
ExperimentSummary run_experiment(const ExperimentConfig& config, const std::string& out_dir,
                                 const std::string& data_dir = {}, bool force = false);

std::string config_hash(const ExperimentConfig& config);

}  // namespace fsda
