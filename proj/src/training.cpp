#include "fsda/training.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "fsda/model.hpp"

namespace fsda {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
  if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
  if (crop_height < 1 || crop_width < 1) throw std::invalid_argument("crop size must be positive");
  if (!(base_lr > 0.0)) throw std::invalid_argument("base_lr must be > 0");
  if (alpha < 0.0) throw std::invalid_argument("alpha must be >= 0");
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (momentum < 0.0 || momentum >= 1.0) throw std::invalid_argument("momentum must be in [0, 1)");
  if (few_shot_epochs < 0) throw std::invalid_argument("few_shot_epochs must be >= 0");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},
                     {"crop_size", {c.crop_height, c.crop_width}},
                     {"base_lr", c.base_lr},
                     {"momentum", c.momentum},
                     {"lr_power", c.lr_power},
                     {"weight_decay", c.weight_decay},
                     {"alpha", c.alpha},
                     {"temperature", c.temperature},
                     {"seed", c.seed},
                     {"batch_size", c.batch_size},
                     {"support_retries", c.support_retries},
                     {"few_shot_epochs", c.few_shot_epochs}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  const TrainConfig d;
  c.epochs = j.value("epochs", d.epochs);
  if (j.contains("crop_size")) {
    c.crop_height = j.at("crop_size").at(0).get<int>();
    c.crop_width = j.at("crop_size").at(1).get<int>();
  }
  c.base_lr = j.value("base_lr", d.base_lr);
  c.momentum = j.value("momentum", d.momentum);
  c.lr_power = j.value("lr_power", d.lr_power);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.alpha = j.value("alpha", d.alpha);
  c.temperature = j.value("temperature", d.temperature);
  c.seed = j.value("seed", d.seed);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.support_retries = j.value("support_retries", d.support_retries);
  c.few_shot_epochs = j.value("few_shot_epochs", d.few_shot_epochs);
}

// ---------------------------------------------------------------------------
// Losses

double cross_entropy_loss(const Tensor& probabilities, const LabelMask& mask) {
  if (probabilities.height != mask.height || probabilities.width != mask.width) {
    throw std::invalid_argument("cross_entropy_loss: probability map and mask differ in size");
  }
  double total = 0.0;
  std::size_t valid = 0;
  for (std::size_t i = 0; i < mask.pixels(); ++i) {
    const int label = mask.data[i];
    if (label == kIgnoreLabel) continue;
    if (label >= probabilities.channels) throw std::invalid_argument("label outside the probability channels");
    total -= std::log(std::max(probabilities.pixel(i)[label], kLogClamp));
    ++valid;
  }
  if (valid == 0) throw AllIgnored("no valid pixel in the loss target");
  return total / static_cast<double>(valid);
}

double cross_entropy_loss(const ProbabilityMap& probabilities, const LabelMask& mask) {
  return cross_entropy_loss(probabilities.data, mask);
}

double combined_loss(double loss_query, double loss_support, double alpha) {
  if (alpha < 0.0) throw std::invalid_argument("alpha must be >= 0");
  return loss_query + alpha * loss_support;
}

double poly_lr(double base_lr, long step, long max_steps, double power) {
  if (step < 0 || step > max_steps) throw std::invalid_argument("poly_lr: step outside [0, max_steps]");
  if (max_steps == 0) return base_lr;
  return base_lr * std::pow(1.0 - static_cast<double>(step) / static_cast<double>(max_steps), power);
}

namespace {

/// Softmax cross-entropy over `logits` (already scaled); writes
/// d(mean loss)/d(logits) into `grad` when non-null.
double softmax_cross_entropy(const Tensor& logits, const LabelMask& mask, Tensor* grad, std::size_t& valid) {
  const int n = logits.channels;
  valid = 0;
  for (std::uint8_t v : mask.data) {
    if (v != kIgnoreLabel) ++valid;
  }
  if (valid == 0) throw AllIgnored("no valid pixel in the loss target");
  if (grad) *grad = Tensor(logits.height, logits.width, n);
  std::vector<double> prob(n);
  double total = 0.0;
  const double inv = 1.0 / static_cast<double>(valid);
  for (std::size_t i = 0; i < mask.pixels(); ++i) {
    const int label = mask.data[i];
    if (label == kIgnoreLabel) continue;
    if (label >= n) throw std::invalid_argument("label outside the class channels");
    const auto z = logits.pixel(i);
    double peak = -std::numeric_limits<double>::infinity();
    for (int k = 0; k < n; ++k) peak = std::max(peak, z[k]);
    double sum = 0.0;
    for (int k = 0; k < n; ++k) {
      prob[k] = std::exp(z[k] - peak);
      sum += prob[k];
    }
    for (int k = 0; k < n; ++k) prob[k] /= sum;
    const bool clamped = prob[label] < kLogClamp;
    total -= std::log(std::max(prob[label], kLogClamp));
    if (grad && !clamped) {
      auto g = grad->pixel(i);
      for (int k = 0; k < n; ++k) g[k] = prob[k] * inv;
      g[label] -= inv;
    }
  }
  return total * inv;
}

struct PrototypeState {
  std::vector<std::vector<double>> vectors;
  std::vector<std::size_t> counts;
  LabelMask reduced;  // support mask at feature resolution, compacted ids
};

/// Cosine scores of every feature cell against every prototype, times scale.
Tensor scaled_scores(const Tensor& features, const std::vector<std::vector<double>>& protos, double scale) {
  const int n = static_cast<int>(protos.size());
  Tensor out(features.height, features.width, n);
  for (std::size_t i = 0; i < features.pixels(); ++i) {
    const auto x = features.pixel(i);
    auto s = out.pixel(i);
    for (int k = 0; k < n; ++k) s[k] = scale * cosine_similarity(protos[k], x);
  }
  return out;
}

/// Back-propagates d(loss)/d(scaled scores) into the features and prototypes.
void scores_backward(const Tensor& features, const std::vector<std::vector<double>>& protos, double scale,
                     const Tensor& grad_scores, Tensor& grad_features, std::vector<std::vector<double>>& grad_protos) {
  const int n = static_cast<int>(protos.size());
  const int d = features.channels;
  std::vector<double> proto_norm(n);
  for (int k = 0; k < n; ++k) {
    double s = 0.0;
    for (double v : protos[k]) s += v * v;
    proto_norm[k] = std::sqrt(s);
  }
  for (std::size_t i = 0; i < features.pixels(); ++i) {
    const auto x = features.pixel(i);
    auto gx = grad_features.pixel(i);
    double xn = 0.0;
    for (double v : x) xn += v * v;
    xn = std::sqrt(xn);
    const auto gs = grad_scores.pixel(i);
    for (int k = 0; k < n; ++k) {
      const double g = scale * gs[k];
      if (g == 0.0) continue;
      const auto& p = protos[k];
      auto& gp = grad_protos[k];
      double dot = 0.0;
      for (int c = 0; c < d; ++c) dot += x[c] * p[c];
      const double denom = xn * proto_norm[k];
      if (denom > kCosineEpsilon) {
        const double a = g / denom;
        const double bx = g * dot / (denom * xn * xn);
        const double bp = g * dot / (denom * proto_norm[k] * proto_norm[k]);
        for (int c = 0; c < d; ++c) {
          gx[c] += a * p[c] - bx * x[c];
          gp[c] += a * x[c] - bp * p[c];
        }
      } else {
        const double a = g / kCosineEpsilon;
        for (int c = 0; c < d; ++c) {
          gx[c] += a * p[c];
          gp[c] += a * x[c];
        }
      }
    }
  }
}

/// Loss of one branch (query or support self-segmentation) and, optionally,
/// its gradients. Scores are upsampled to mask resolution before the softmax.
double branch_loss(const Tensor& features, const LabelMask& mask, const std::vector<std::vector<double>>& protos,
                   double temperature, std::size_t& valid, Tensor* grad_features,
                   std::vector<std::vector<double>>* grad_protos, double weight) {
  const Tensor scores = scaled_scores(features, protos, temperature);
  const Tensor logits = resize_bilinear(scores, mask.height, mask.width);
  Tensor grad_logits;
  const double loss = softmax_cross_entropy(logits, mask, grad_features ? &grad_logits : nullptr, valid);
  if (grad_features && weight != 0.0) {
    Tensor grad_scores = resize_bilinear_adjoint(grad_logits, features.height, features.width);
    for (double& v : grad_scores.data) v *= weight;
    scores_backward(features, protos, temperature, grad_scores, *grad_features, *grad_protos);
  }
  return loss;
}

struct EpisodeMasks {
  LabelMask support;
  LabelMask query;
  int n_way = 0;
};

/// Drops episode classes that vanish when the support mask is reduced to
/// feature resolution, so every remaining class has a prototype.
EpisodeMasks compact_episode(const Episode& episode, int feature_height, int feature_width, LabelMask& reduced) {
  reduced = resize_nearest(episode.support.mask, feature_height, feature_width);
  const std::vector<int> present = unique_labels(reduced);
  if (present.empty()) throw EmptySupport("support classes vanish at feature resolution");
  EpisodeMasks out{episode.support.mask, episode.query.mask, static_cast<int>(present.size())};
  if (static_cast<int>(present.size()) == episode.n_way()) return out;
  std::array<std::uint8_t, 256> lut;
  lut.fill(kIgnoreLabel);
  for (std::size_t i = 0; i < present.size(); ++i) lut[present[i]] = static_cast<std::uint8_t>(i);
  for (auto& v : out.support.data) v = lut[v];
  for (auto& v : out.query.data) v = lut[v];
  for (auto& v : reduced.data) v = lut[v];
  return out;
}

PrototypeState episode_prototypes(const FeatureMap& support_features, LabelMask reduced, int n_way) {
  PrototypeState state;
  const Tensor& x = support_features.values;
  state.vectors.assign(n_way, std::vector<double>(x.channels, 0.0));
  state.counts.assign(n_way, 0);
  for (std::size_t i = 0; i < reduced.pixels(); ++i) {
    const int label = reduced.data[i];
    if (label == kIgnoreLabel) continue;
    const auto v = x.pixel(i);
    for (int c = 0; c < x.channels; ++c) state.vectors[label][c] += v[c];
    ++state.counts[label];
  }
  for (int k = 0; k < n_way; ++k) {
    for (double& v : state.vectors[k]) v /= static_cast<double>(state.counts[k]);
  }
  state.reduced = std::move(reduced);
  return state;
}

StepResult run_episode(const Model& model, const Episode& episode, const TrainConfig& config, bool with_grads) {
  if (episode.support.image.height != episode.support.mask.height ||
      episode.query.image.height != episode.query.mask.height) {
    throw std::invalid_argument("episode image and mask sizes differ");
  }
  EncoderTape support_tape;
  EncoderTape query_tape;
  const FeatureMap fs = model.encode(episode.support.image, support_tape);
  const FeatureMap fq = model.encode(episode.query.image, query_tape);

  LabelMask reduced;
  const EpisodeMasks masks = compact_episode(episode, fs.values.height, fs.values.width, reduced);
  PrototypeState protos = episode_prototypes(fs, std::move(reduced), masks.n_way);

  StepResult result;
  LossReport& report = result.report;
  report.n_way = masks.n_way;

  Tensor grad_q;
  Tensor grad_s;
  std::vector<std::vector<double>> grad_protos;
  if (with_grads) {
    grad_q = Tensor(fq.values.height, fq.values.width, fq.values.channels);
    grad_s = Tensor(fs.values.height, fs.values.width, fs.values.channels);
    grad_protos.assign(masks.n_way, std::vector<double>(fs.dim(), 0.0));
  }
  report.loss_query = branch_loss(fq.values, masks.query, protos.vectors, config.temperature, report.valid_query,
                                  with_grads ? &grad_q : nullptr, &grad_protos, 1.0);
  report.loss_support = branch_loss(fs.values, masks.support, protos.vectors, config.temperature,
                                    report.valid_support, with_grads ? &grad_s : nullptr, &grad_protos, config.alpha);
  report.loss_total = combined_loss(report.loss_query, report.loss_support, config.alpha);
  if (!with_grads) return result;

  // Masked average pooling is linear: each cell receives its class gradient / count.
  for (std::size_t i = 0; i < protos.reduced.pixels(); ++i) {
    const int label = protos.reduced.data[i];
    if (label == kIgnoreLabel) continue;
    auto g = grad_s.pixel(i);
    const double inv = 1.0 / static_cast<double>(protos.counts[label]);
    for (int c = 0; c < grad_s.channels; ++c) g[c] += grad_protos[label][c] * inv;
  }
  result.gradients = model.zero_gradients();
  model.backward(query_tape, grad_q, result.gradients);
  model.backward(support_tape, grad_s, result.gradients);
  return result;
}

void write_checkpoint(const FitOptions& options, const Model& model, int epoch) {
  if (options.checkpoint_dir.empty()) return;
  fs::create_directories(options.checkpoint_dir);
  char name[32];
  std::snprintf(name, sizeof(name), "epoch_%03d.ckpt", epoch);
  save_checkpoint((fs::path(options.checkpoint_dir) / name).string(), model);
}

class LogSink {
 public:
  explicit LogSink(const FitOptions& options) : options_(options) {
    if (!options.log_path.empty()) {
      if (const auto parent = fs::path(options.log_path).parent_path(); !parent.empty()) {
        fs::create_directories(parent);
      }
      file_.open(options.log_path, std::ios::trunc);
      if (!file_) throw Error("cannot write training log " + options.log_path);
    }
  }

  void emit(TrainingLog& log, StepRecord record) {
    if (file_.is_open()) file_ << record.to_json().dump() << '\n';
    if (options_.on_step) options_.on_step(record);
    log.records.push_back(std::move(record));
  }

 private:
  const FitOptions& options_;
  std::ofstream file_;
};

[[noreturn]] void abort_non_finite(const FitOptions& options, const StepRecord& record) {
  if (!options.dump_path.empty()) {
    std::ofstream dump(options.dump_path);
    dump << record.to_json().dump(2) << '\n';
  }
  throw NonFiniteLoss("non-finite loss at step " + std::to_string(record.step) + " (support " +
                      record.support_name + ", query " + record.query_name + ")");
}

void accumulate(Gradients& into, const Gradients& add) {
  for (std::size_t p = 0; p < into.size(); ++p) {
    for (std::size_t i = 0; i < into[p].size(); ++i) into[p][i] += add[p][i];
  }
}

void scale(Gradients& grads, double factor) {
  for (auto& g : grads) {
    for (double& v : g) v *= factor;
  }
}

}  // namespace

StepResult train_step(const Model& model, const Episode& episode, const TrainConfig& config) {
  return run_episode(model, episode, config, true);
}

LossReport episode_loss(const Model& model, const Episode& episode, const TrainConfig& config) {
  return run_episode(model, episode, config, false).report;
}

SgdMomentum::SgdMomentum(const Model& model, double momentum, double weight_decay)
    : momentum_(momentum), weight_decay_(weight_decay), velocity_(model.zero_gradients()) {}

void SgdMomentum::step(Model& model, const Gradients& grads, double lr) {
  auto& params = model.parameters();
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (!params[p].trainable) continue;
    auto& w = params[p].values;
    auto& v = velocity_[p];
    const auto& g = grads[p];
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = momentum_ * v[i] + g[i] + weight_decay_ * w[i];
      w[i] -= lr * v[i];
    }
  }
}

nlohmann::json StepRecord::to_json() const {
  nlohmann::json j{{"step", step}, {"epoch", epoch}, {"lr", lr}, {"support", support_name}, {"query", query_name}};
  if (report) {
    j["loss_query"] = report->loss_query;
    j["loss_support"] = report->loss_support;
    j["loss_total"] = report->loss_total;
    j["n_way"] = report->n_way;
    j["valid_query"] = report->valid_query;
    j["valid_support"] = report->valid_support;
  }
  if (!skipped.empty()) j["skipped"] = skipped;
  return j;
}

std::string TrainingLog::to_ndjson() const {
  std::string out;
  for (const auto& r : records) {
    out += r.to_json().dump();
    out += '\n';
  }
  return out;
}

FitResult fit(const Model& initial, const Dataset& source, const SupportSet& support, const TrainConfig& config,
              const FitOptions& options) {
  config.validate();
  if (source.empty()) throw std::invalid_argument("fit: source dataset is empty");
  if (support.empty()) throw std::invalid_argument("fit: support set is empty");

  FitResult result{initial, {}};
  Model& model = result.model;
  SgdMomentum optimizer(model, config.momentum, config.weight_decay);
  LogSink sink(options);

  EpisodeOptions episode_options;
  episode_options.crop_height = config.crop_height;
  episode_options.crop_width = config.crop_width;
  episode_options.retry_budget = config.support_retries;
  EpisodeStream stream(source, support, episode_options, derive_seed(config.seed, 0xE915));

  const long steps_per_epoch = (static_cast<long>(source.size()) + config.batch_size - 1) / config.batch_size;
  const long max_steps = steps_per_epoch * config.epochs;
  long step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    for (long s = 0; s < steps_per_epoch; ++s, ++step) {
      const double lr = poly_lr(config.base_lr, step, max_steps, config.lr_power);
      Gradients batch = model.zero_gradients();
      int used = 0;
      for (int b = 0; b < config.batch_size; ++b) {
        StepRecord record;
        record.step = step;
        record.epoch = epoch;
        record.lr = lr;
        try {
          const Episode episode = stream.next();
          record.support_name = episode.support.name;
          record.query_name = episode.query.name;
          StepResult r = train_step(model, episode, config);
          record.report = r.report;
          if (!std::isfinite(r.report.loss_total)) abort_non_finite(options, record);
          accumulate(batch, r.gradients);
          ++used;
        } catch (const EmptySupport& e) {
          record.skipped = e.what();
        } catch (const AllIgnored& e) {
          record.skipped = e.what();
        }
        sink.emit(result.log, std::move(record));
      }
      if (used == 0) continue;
      if (used > 1) scale(batch, 1.0 / used);
      optimizer.step(model, batch, lr);
    }
    write_checkpoint(options, model, epoch + 1);
  }
  return result;
}

StepResult baseline_step(const Model& model, const LabeledSample& sample) {
  EncoderTape tape;
  const FeatureMap features = model.encode(sample.image, tape);
  const Tensor logits = model.head_logits(features);
  const Tensor upsampled = resize_bilinear(logits, sample.mask.height, sample.mask.width);
  Tensor grad_upsampled;
  StepResult result;
  std::size_t valid = 0;
  result.report.loss_query = softmax_cross_entropy(upsampled, sample.mask, &grad_upsampled, valid);
  result.report.loss_total = result.report.loss_query;
  result.report.valid_query = valid;
  result.report.n_way = model.head_classes();
  result.gradients = model.zero_gradients();
  const Tensor grad_logits = resize_bilinear_adjoint(grad_upsampled, logits.height, logits.width);
  const Tensor grad_features = model.head_backward(features, grad_logits, result.gradients);
  model.backward(tape, grad_features, result.gradients);
  return result;
}

FitResult train_baseline(const Model& initial, const Dataset& dataset, const TrainConfig& config, BaselineMode mode,
                         const FitOptions& options) {
  config.validate();
  if (dataset.empty()) throw std::invalid_argument("train_baseline: dataset is empty");
  if (initial.head_classes() < 1) throw std::invalid_argument("train_baseline: model needs a classifier head");

  const int epochs = mode == BaselineMode::kFewShotOnly ? config.few_shot_epochs : config.epochs;
  FitResult result{initial, {}};
  Model& model = result.model;
  SgdMomentum optimizer(model, config.momentum, config.weight_decay);
  LogSink sink(options);
  Rng rng(derive_seed(config.seed, mode == BaselineMode::kFewShotOnly ? 0xF5 : 0x50));

  const long steps_per_epoch = (static_cast<long>(dataset.size()) + config.batch_size - 1) / config.batch_size;
  const long max_steps = steps_per_epoch * epochs;
  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  long step = 0;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    for (long s = 0; s < steps_per_epoch; ++s, ++step) {
      const double lr = poly_lr(config.base_lr, step, max_steps, config.lr_power);
      Gradients batch = model.zero_gradients();
      int used = 0;
      for (int b = 0; b < config.batch_size; ++b) {
        if (cursor == order.size()) {
          order.resize(dataset.size());
          for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
          rng.shuffle(order);
          cursor = 0;
        }
        const LabeledSample& sample = dataset[order[cursor++]];
        StepRecord record;
        record.step = step;
        record.epoch = epoch;
        record.lr = lr;
        record.query_name = sample.name;
        try {
          const LabeledSample crop = augment(sample, config.crop_height, config.crop_width, rng);
          StepResult r = baseline_step(model, crop);
          record.report = r.report;
          if (!std::isfinite(r.report.loss_total)) abort_non_finite(options, record);
          accumulate(batch, r.gradients);
          ++used;
        } catch (const AllIgnored& e) {
          record.skipped = e.what();
        }
        sink.emit(result.log, std::move(record));
      }
      if (used == 0) continue;
      if (used > 1) scale(batch, 1.0 / used);
      optimizer.step(model, batch, lr);
    }
    write_checkpoint(options, model, epoch + 1);
  }
  return result;
}

}  // namespace fsda
