#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fsda/data.hpp"
#include "fsda/model.hpp"
#include "fsda/prototypes.hpp"

namespace fsda {

/// Probabilities below this are clamped before taking the log.
inline constexpr double kLogClamp = 1e-12;

struct TrainConfig {
  int epochs = 50;
  int crop_height = 64;
  int crop_width = 64;
  double base_lr = 0.001;
  double momentum = 0.9;
  double lr_power = 0.9;
  double weight_decay = 0.0;
  double alpha = 0.2;          // weight of the support self-segmentation loss
  double temperature = 1.0;    // scale applied to cosine scores before softmax
  std::uint64_t seed = 0;
  int batch_size = 1;          // episodes accumulated per update
  int support_retries = 10;
  int few_shot_epochs = 200;   // epoch cap for the few-shot-only baseline

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

void to_json(nlohmann::json& j, const TrainConfig& config);
void from_json(const nlohmann::json& j, TrainConfig& config);

struct LossReport {
  double loss_query = 0.0;
  double loss_support = 0.0;
  double loss_total = 0.0;
  int n_way = 0;
  std::size_t valid_query = 0;
  std::size_t valid_support = 0;

  bool operator==(const LossReport&) const = default;
};

/// Mean of -log p(label) over non-ignored pixels; channels index the labels.
double cross_entropy_loss(const ProbabilityMap& probabilities, const LabelMask& mask);
double cross_entropy_loss(const Tensor& probabilities, const LabelMask& mask);

/// loss_query + alpha * loss_support.
double combined_loss(double loss_query, double loss_support, double alpha);

/// base_lr * (1 - step / max_steps)^power.
double poly_lr(double base_lr, long step, long max_steps, double power);

struct StepResult {
  Gradients gradients;
  LossReport report;
};

/// Episodic forward/backward: prototypes from the support features score both
/// the query and the support itself; returns d(total loss)/d(parameters).
/// Throws EmptySupport or AllIgnored for degenerate episodes.
StepResult train_step(const Model& model, const Episode& episode, const TrainConfig& config);

/// Only the loss terms, without gradients.
LossReport episode_loss(const Model& model, const Episode& episode, const TrainConfig& config);

/// Momentum SGD: v = mu * v + (g + wd * w); w -= lr * v.
class SgdMomentum {
 public:
  SgdMomentum(const Model& model, double momentum, double weight_decay);
  void step(Model& model, const Gradients& grads, double lr);

 private:
  double momentum_;
  double weight_decay_;
  Gradients velocity_;
};

struct StepRecord {
  long step = 0;
  int epoch = 0;
  double lr = 0.0;
  std::optional<LossReport> report;
  std::string skipped;  // reason, empty when the step was used
  std::string support_name;
  std::string query_name;

  nlohmann::json to_json() const;
};

struct TrainingLog {
  std::vector<StepRecord> records;

  /// Newline-delimited JSON, one record per line.
  std::string to_ndjson() const;
};

struct FitOptions {
  std::string log_path;        // NDJSON log, written incrementally when set
  std::string checkpoint_dir;  // one checkpoint per epoch when set
  std::string dump_path;       // diagnostic state on a non-finite loss
  std::function<void(const StepRecord&)> on_step;
};

class NonFiniteLoss : public Error {
 public:
  using Error::Error;
};

struct FitResult {
  Model model;
  TrainingLog log;
};

/// Episodic training: epochs x |source| episodes (queries from the source
/// domain, supports from the target support set) with poly-decayed momentum SGD.
FitResult fit(const Model& initial, const Dataset& source, const SupportSet& support, const TrainConfig& config,
              const FitOptions& options = {});

enum class BaselineMode { kSourceOnly, kFewShotOnly };

/// Conventional per-pixel softmax training of encoder + linear head. Source-only
/// runs config.epochs over `dataset`; few-shot-only runs config.few_shot_epochs.
FitResult train_baseline(const Model& initial, const Dataset& dataset, const TrainConfig& config, BaselineMode mode,
                         const FitOptions& options = {});

/// Baseline loss and gradients for one (augmented) sample.
StepResult baseline_step(const Model& model, const LabeledSample& sample);

}  // namespace fsda
