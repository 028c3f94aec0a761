#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "fsda/tensor.hpp"

namespace fsda {

inline constexpr double kCosineEpsilon = 1e-8;

struct Prototype {
  int class_id = 0;
  std::vector<double> vector;
  int n_contributors = 1;

  bool operator==(const Prototype&) const = default;
};

/// Class prototypes averaged over a support set, ready for test-time use.
class PrototypeBank {
 public:
  PrototypeBank() = default;
  explicit PrototypeBank(int dim, std::string source = {}) : dim_(dim), source_(std::move(source)) {}

  int dim() const { return dim_; }
  const std::string& source() const { return source_; }
  void set_source(std::string source) { source_ = std::move(source); }

  /// Throws on a duplicate class or a dimension mismatch.
  void insert(Prototype prototype);
  bool contains(int class_id) const { return entries_.count(class_id) != 0; }
  const Prototype& at(int class_id) const { return entries_.at(class_id); }
  const std::map<int, Prototype>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::vector<int> class_ids() const;
  /// Prototypes in ascending class-id order.
  std::vector<Prototype> prototypes() const;

  bool operator==(const PrototypeBank&) const = default;

 private:
  int dim_ = 0;
  std::string source_;
  std::map<int, Prototype> entries_;
};

/// Per-pixel, per-class values at some resolution, classes in ascending id order.
struct ScoreMap {
  Tensor data;
  std::vector<int> class_order;
};

using ProbabilityMap = ScoreMap;

/// Mean feature over the cells whose label equals class_id. The mask must
/// already be at feature resolution.
std::vector<double> masked_average_pool(const FeatureMap& features, const LabelMask& mask, int class_id);

struct PrototypeExtraction {
  std::vector<Prototype> prototypes;  // ascending class id
  std::vector<int> vanished;          // present in the mask but lost at feature resolution
};

/// One prototype per class present in `mask`. A mask larger than the feature
/// map is first reduced with nearest-neighbour sampling.
PrototypeExtraction extract_prototypes(const FeatureMap& features, const LabelMask& mask);

/// Averages per-image prototypes over the images that contain each class.
PrototypeBank aggregate_bank(const std::vector<std::vector<Prototype>>& per_image, std::string source = {});

double cosine_similarity(std::span<const double> a, std::span<const double> b, double epsilon = kCosineEpsilon);

ScoreMap score_map(const FeatureMap& features, const std::vector<Prototype>& prototypes);
ScoreMap score_map(const FeatureMap& features, const PrototypeBank& bank);

/// Softmax over temperature * scores at every pixel.
ProbabilityMap prototype_softmax(const ScoreMap& scores, double temperature = 1.0);

/// Bilinearly upsamples to (height, width), takes the per-pixel argmax and
/// maps it through class_order; ties go to the lowest class id.
LabelMask predict_labels(const ScoreMap& scores, int height, int width);

void save_bank(const std::string& path, const PrototypeBank& bank);
/// With expected_dim > 0, a bank of another dimension is rejected.
PrototypeBank load_bank(const std::string& path, int expected_dim = 0);

}  // namespace fsda
