#include "fsda/evaluation.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fsda {

namespace fs = std::filesystem;

ConfusionMatrix::ConfusionMatrix(int n_class)
    : n_class_(n_class), counts_(static_cast<std::size_t>(n_class) * n_class, 0) {
  if (n_class < 0) throw std::invalid_argument("n_class must be >= 0");
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t sum = 0;
  for (auto c : counts_) sum += c;
  return sum;
}

void ConfusionMatrix::accumulate(const LabelMask& predicted, const LabelMask& truth) {
  if (predicted.height != truth.height || predicted.width != truth.width) {
    throw std::invalid_argument("prediction and ground truth differ in size");
  }
  for (std::size_t i = 0; i < truth.pixels(); ++i) {
    const int g = truth.data[i];
    if (g == kIgnoreLabel) continue;
    const int p = predicted.data[i];
    if (g >= n_class_ || p >= n_class_) {
      throw std::invalid_argument("label " + std::to_string(std::max(g, p)) + " outside the confusion matrix");
    }
    ++at(g, p);
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.n_class_ != n_class_) throw std::invalid_argument("cannot merge matrices of different size");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::string to_string(Scenario scenario) {
  switch (scenario) {
    case Scenario::kStandard: return "standard";
    case Scenario::kOsda: return "osda";
    case Scenario::kMultiSource: return "multi-source";
  }
  return "standard";
}

Scenario scenario_from_string(const std::string& name) {
  if (name == "standard") return Scenario::kStandard;
  if (name == "osda") return Scenario::kOsda;
  if (name == "multi-source" || name == "multi_source") return Scenario::kMultiSource;
  throw std::invalid_argument("unknown scenario '" + name + "'");
}

std::vector<int> EvalReport::excluded() const {
  std::vector<int> out;
  for (std::size_t c = 0; c < per_class_iou.size(); ++c) {
    if (!per_class_iou[c]) out.push_back(static_cast<int>(c));
  }
  return out;
}

EvalReport miou(const ConfusionMatrix& confusion, const std::map<std::string, std::vector<int>>& subsets) {
  const int n = confusion.n_class();
  if (n == 0) throw std::invalid_argument("miou: empty confusion matrix");
  EvalReport report;
  report.per_class_iou.resize(n);
  double sum = 0.0;
  int defined = 0;
  for (int c = 0; c < n; ++c) {
    std::uint64_t row = 0;
    std::uint64_t col = 0;
    for (int k = 0; k < n; ++k) {
      row += confusion.at(c, k);
      col += confusion.at(k, c);
    }
    const std::uint64_t tp = confusion.at(c, c);
    const std::uint64_t denom = row + col - tp;  // TP + FN + FP
    if (denom == 0) continue;
    const double iou = static_cast<double>(tp) / static_cast<double>(denom);
    report.per_class_iou[c] = iou;
    sum += iou;
    ++defined;
  }
  if (defined == 0) throw Error("miou: every class has a zero denominator");
  report.miou = sum / defined;
  for (const auto& [name, classes] : subsets) {
    double s = 0.0;
    int m = 0;
    for (int c : classes) {
      if (c < 0 || c >= n) throw std::invalid_argument("subset '" + name + "' names class " + std::to_string(c));
      if (report.per_class_iou[c]) {
        s += *report.per_class_iou[c];
        ++m;
      }
    }
    if (m > 0) report.class_subset_mious[name] = s / m;
  }
  return report;
}

namespace {

ImageTensor pad_to_stride(const ImageTensor& image, int stride) {
  const int h = (image.height + stride - 1) / stride * stride;
  const int w = (image.width + stride - 1) / stride * stride;
  if (h == image.height && w == image.width) return image;
  ImageTensor padded(h, w, image.channels, 0.0);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      for (int c = 0; c < image.channels; ++c) padded.at(y, x, c) = image.at(y, x, c);
    }
  }
  return padded;
}

LabelMask crop_mask(const LabelMask& mask, int height, int width) {
  if (mask.height == height && mask.width == width) return mask;
  LabelMask out(height, width);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) out.at(y, x) = mask.at(y, x);
  }
  return out;
}

}  // namespace

LabelMask segment_image(const Model& model, const PrototypeBank& bank, const ImageTensor& image) {
  if (bank.dim() != model.output_dim()) {
    throw ConfigMismatch("bank dimension " + std::to_string(bank.dim()) + " does not match encoder output " +
                         std::to_string(model.output_dim()));
  }
  const ImageTensor padded = pad_to_stride(image, model.output_stride());
  const FeatureMap features = model.encode(padded);
  const ScoreMap scores = score_map(features, bank);
  return crop_mask(predict_labels(scores, padded.height, padded.width), image.height, image.width);
}

LabelMask segment_image_with_head(const Model& model, const ImageTensor& image) {
  const ImageTensor padded = pad_to_stride(image, model.output_stride());
  const FeatureMap features = model.encode(padded);
  ScoreMap logits;
  logits.data = model.head_logits(features);
  for (int c = 0; c < model.head_classes(); ++c) logits.class_order.push_back(c);
  return crop_mask(predict_labels(logits, padded.height, padded.width), image.height, image.width);
}

ConfusionMatrix confusion_over(const Dataset& dataset, int n_class,
                               const std::function<LabelMask(const ImageTensor&)>& predict) {
  if (dataset.empty()) throw std::invalid_argument("evaluation dataset is empty");
  ConfusionMatrix confusion(n_class);
  for (const auto& sample : dataset) confusion.accumulate(predict(sample.image), sample.mask);
  return confusion;
}

EvalReport evaluate(const Model& model, const PrototypeBank& bank, const Dataset& dataset, int n_class,
                    Scenario scenario, const std::map<std::string, std::vector<int>>& subsets) {
  if (bank.dim() != model.output_dim()) {
    throw ConfigMismatch("bank dimension " + std::to_string(bank.dim()) + " does not match encoder output " +
                         std::to_string(model.output_dim()));
  }
  const ConfusionMatrix confusion =
      confusion_over(dataset, n_class, [&](const ImageTensor& image) { return segment_image(model, bank, image); });
  EvalReport report = miou(confusion, subsets);
  report.scenario = scenario;
  return report;
}

EvalReport evaluate_head(const Model& model, const Dataset& dataset, int n_class,
                         const std::map<std::string, std::vector<int>>& subsets) {
  const ConfusionMatrix confusion = confusion_over(
      dataset, n_class, [&](const ImageTensor& image) { return segment_image_with_head(model, image); });
  return miou(confusion, subsets);
}

PrototypeBank build_bank(const Model& model, const std::vector<LabeledSample>& support, std::string source) {
  std::vector<std::vector<Prototype>> per_image;
  for (const auto& sample : support) {
    const FeatureMap features = model.encode(pad_to_stride(sample.image, model.output_stride()));
    // Padding cells carry no label.
    LabelMask mask(features.values.height * features.stride, features.values.width * features.stride, kIgnoreLabel);
    for (int y = 0; y < sample.mask.height; ++y) {
      for (int x = 0; x < sample.mask.width; ++x) mask.at(y, x) = sample.mask.at(y, x);
    }
    if (unique_labels(mask).empty()) continue;
    per_image.push_back(extract_prototypes(features, mask).prototypes);
  }
  return aggregate_bank(per_image, std::move(source));
}

// ---------------------------------------------------------------------------
// Reports

namespace {

constexpr int kReportVersion = 1;

std::string class_label(const EvalReport& report, std::size_t c) {
  if (c < report.class_names.size() && !report.class_names[c].empty()) return report.class_names[c];
  return "class_" + std::to_string(c);
}

std::string percent(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.1f", 100.0 * v);
  return buf;
}

}  // namespace

std::string format_report_table(const EvalReport& report) {
  std::size_t width = 8;
  for (std::size_t c = 0; c < report.per_class_iou.size(); ++c) width = std::max(width, class_label(report, c).size());
  for (const auto& [name, _] : report.class_subset_mious) width = std::max(width, name.size());
  std::ostringstream out;
  char line[256];
  std::snprintf(line, sizeof(line), "%-*s  %7s\n", static_cast<int>(width), "class", "IoU(%)");
  out << line << std::string(width + 9, '-') << '\n';
  for (std::size_t c = 0; c < report.per_class_iou.size(); ++c) {
    const auto& iou = report.per_class_iou[c];
    std::snprintf(line, sizeof(line), "%-*s  %7s\n", static_cast<int>(width), class_label(report, c).c_str(),
                  iou ? percent(*iou).c_str() : "n/a");
    out << line;
  }
  out << std::string(width + 9, '-') << '\n';
  std::snprintf(line, sizeof(line), "%-*s  %7s\n", static_cast<int>(width), "mIoU", percent(report.miou).c_str());
  out << line;
  for (const auto& [name, value] : report.class_subset_mious) {
    std::snprintf(line, sizeof(line), "%-*s  %7s\n", static_cast<int>(width), name.c_str(), percent(value).c_str());
    out << line;
  }
  out << "scenario: " << to_string(report.scenario) << '\n';
  return out.str();
}

std::string format_comparison_table(const std::vector<std::pair<std::string, EvalReport>>& rows) {
  if (rows.empty()) return {};
  std::size_t name_width = 6;
  for (const auto& [name, _] : rows) name_width = std::max(name_width, name.size());
  const std::size_t n = rows.front().second.per_class_iou.size();
  std::ostringstream out;
  char cell[64];
  std::snprintf(cell, sizeof(cell), "%-*s", static_cast<int>(name_width), "method");
  out << cell;
  for (std::size_t c = 0; c < n; ++c) {
    std::snprintf(cell, sizeof(cell), " %6s", ("c" + std::to_string(c)).c_str());
    out << cell;
  }
  out << "   mIoU\n";
  for (const auto& [name, report] : rows) {
    std::snprintf(cell, sizeof(cell), "%-*s", static_cast<int>(name_width), name.c_str());
    out << cell;
    for (std::size_t c = 0; c < n; ++c) {
      const auto& iou = c < report.per_class_iou.size() ? report.per_class_iou[c] : std::nullopt;
      std::snprintf(cell, sizeof(cell), " %6s", iou ? percent(*iou).c_str() : "-");
      out << cell;
    }
    std::snprintf(cell, sizeof(cell), " %6s\n", percent(report.miou).c_str());
    out << cell;
  }
  return out.str();
}

void emit_report(const EvalReport& report, const std::string& path) {
  nlohmann::json j;
  j["format"] = "fsda-eval-report";
  j["version"] = kReportVersion;
  j["scenario"] = to_string(report.scenario);
  j["miou"] = report.miou;
  j["per_class_iou"] = nlohmann::json::array();
  for (const auto& iou : report.per_class_iou) {
    j["per_class_iou"].push_back(iou ? nlohmann::json(*iou) : nlohmann::json(nullptr));
  }
  j["excluded_classes"] = report.excluded();
  j["class_subset_mious"] = report.class_subset_mious;
  j["class_names"] = report.class_names;

  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  std::ofstream file(target);
  file << j.dump(2) << '\n';
  if (!file) throw Error("failed to write report " + path);
  fs::path table = target;
  table.replace_extension(".txt");
  std::ofstream text(table);
  text << format_report_table(report);
  if (!text) throw Error("failed to write report table " + table.string());
}

EvalReport parse_report(const std::string& path) {
  std::ifstream file(path);
  if (!file) throw Error("cannot open report " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(file);
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(path + ": " + e.what());
  }
  if (j.value("format", "") != "fsda-eval-report" || j.value("version", 0) != kReportVersion) {
    throw IntegrityError(path + " is not a supported evaluation report");
  }
  EvalReport report;
  report.scenario = scenario_from_string(j.at("scenario").get<std::string>());
  report.miou = j.at("miou").get<double>();
  for (const auto& v : j.at("per_class_iou")) {
    report.per_class_iou.push_back(v.is_null() ? std::nullopt : std::optional<double>(v.get<double>()));
  }
  report.class_subset_mious = j.at("class_subset_mious").get<std::map<std::string, double>>();
  report.class_names = j.value("class_names", std::vector<std::string>{});
  return report;
}

}  // namespace fsda
