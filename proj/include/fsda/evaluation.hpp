#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <functional>
#include <vector>

#include "fsda/data.hpp"
#include "fsda/model.hpp"
#include "fsda/prototypes.hpp"

namespace fsda {

/// Rows are ground truth, columns are predictions.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int n_class = 0);

  int n_class() const { return n_class_; }
  std::uint64_t at(int truth, int predicted) const {
    return counts_[static_cast<std::size_t>(truth) * n_class_ + predicted];
  }
  std::uint64_t& at(int truth, int predicted) {
    return counts_[static_cast<std::size_t>(truth) * n_class_ + predicted];
  }
  std::uint64_t total() const;

  /// Counts every pixel whose ground truth is not ignored.
  void accumulate(const LabelMask& predicted, const LabelMask& truth);
  void merge(const ConfusionMatrix& other);

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  int n_class_ = 0;
  std::vector<std::uint64_t> counts_;
};

enum class Scenario { kStandard, kOsda, kMultiSource };

std::string to_string(Scenario scenario);
Scenario scenario_from_string(const std::string& name);

struct EvalReport {
  std::vector<std::optional<double>> per_class_iou;  // nullopt: class absent from gt and prediction
  double miou = 0.0;
  std::map<std::string, double> class_subset_mious;
  Scenario scenario = Scenario::kStandard;
  std::vector<std::string> class_names;  // optional labels for the table

  /// Classes left out of the mean because their IoU is undefined.
  std::vector<int> excluded() const;

  bool operator==(const EvalReport&) const = default;
};

/// IoU = TP / (TP + FP + FN) per class; classes with a zero denominator are
/// excluded from every mean. Throws when no class is defined.
EvalReport miou(const ConfusionMatrix& confusion, const std::map<std::string, std::vector<int>>& subsets = {});

/// Pads to the encoder stride (padding is ignored), scores against the bank,
/// predicts at the original resolution.
LabelMask segment_image(const Model& model, const PrototypeBank& bank, const ImageTensor& image);
/// Same for the linear classifier head of a baseline model.
LabelMask segment_image_with_head(const Model& model, const ImageTensor& image);

ConfusionMatrix confusion_over(const Dataset& dataset, int n_class,
                               const std::function<LabelMask(const ImageTensor&)>& predict);

/// Prototype-based evaluation of every sample in `dataset`.
EvalReport evaluate(const Model& model, const PrototypeBank& bank, const Dataset& dataset, int n_class,
                    Scenario scenario = Scenario::kStandard,
                    const std::map<std::string, std::vector<int>>& subsets = {});

/// Evaluation of a baseline through its classifier head.
EvalReport evaluate_head(const Model& model, const Dataset& dataset, int n_class,
                         const std::map<std::string, std::vector<int>>& subsets = {});

/// Prototypes from clean support images, averaged per class.
PrototypeBank build_bank(const Model& model, const std::vector<LabeledSample>& support, std::string source = {});

/// Writes `path` (JSON) and a sibling `.txt` with the per-class table.
void emit_report(const EvalReport& report, const std::string& path);
EvalReport parse_report(const std::string& path);
std::string format_report_table(const EvalReport& report);

/// Side-by-side mIoU table of several named reports, one row per report.
std::string format_comparison_table(const std::vector<std::pair<std::string, EvalReport>>& rows);

}  // namespace fsda
