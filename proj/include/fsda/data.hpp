#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fsda/common.hpp"
#include "fsda/tensor.hpp"

namespace fsda {

struct LabeledSample {
  ImageTensor image;
  LabelMask mask;
  std::string name;
};

using Dataset = std::vector<LabeledSample>;

/// Few-shot target subset chosen by occurrence accumulation.
struct SupportSet {
  std::vector<LabeledSample> samples;
  std::vector<std::size_t> indices;  // positions in the source dataset, admission order
  int k_shot = 1;
  int n_class = 1;
  std::uint64_t seed = 0;
  std::vector<int> occurrence;

  /// Classes whose occurrence stayed below k_shot after the single pass.
  std::vector<int> unsaturated() const;
  bool empty() const { return samples.empty(); }
  std::size_t size() const { return samples.size(); }
};

/// The seeded traversal order used by construct_support_set.
std::vector<std::size_t> support_permutation(std::size_t n, std::uint64_t seed);

/// One pass over a seeded permutation of `dataset`: an image is admitted iff it
/// raises the occurrence count of at least one class still below k_shot.
SupportSet construct_support_set(const Dataset& dataset, int k_shot, int n_class, std::uint64_t seed);

struct RemappedLabels {
  LabelMask support;
  LabelMask query;
  std::vector<int> class_set;  // original ids, ascending; index = remapped id
};

/// Restricts both masks to the classes present in the support mask and
/// renumbers them 0..n_way-1; everything else becomes kIgnoreLabel.
RemappedLabels remap_episode_labels(const LabelMask& support_mask, const LabelMask& query_mask);

/// Maps remapped ids back through class_set; kIgnoreLabel is preserved.
LabelMask restore_episode_labels(const LabelMask& remapped, const std::vector<int>& class_set);

struct Episode {
  LabeledSample support;  // target domain
  LabeledSample query;    // source domain
  std::vector<int> class_set;

  int n_way() const { return static_cast<int>(class_set.size()); }
};

/// Geometry of one scaling-and-cropping draw.
struct AugmentParams {
  double scale = 1.0;
  bool flip = false;
  double angle_deg = 0.0;
  int offset_y = 0;  // crop origin in the scaled frame; negative means padding
  int offset_x = 0;
};

AugmentParams draw_augment_params(Rng& rng, int height, int width, int crop_height, int crop_width);

/// Scale, flip, rotate about the scaled centre, then crop, as one inverse
/// warp. Images are sampled bilinearly, masks by nearest neighbour; pixels that
/// fall outside the source get image 0 and mask kIgnoreLabel.
LabeledSample apply_augment(const LabeledSample& sample, const AugmentParams& params, int crop_height,
                            int crop_width);

LabeledSample augment(const LabeledSample& sample, int crop_height, int crop_width, Rng& rng);

struct EpisodeOptions {
  int crop_height = 64;
  int crop_width = 64;
  int retry_budget = 10;
  bool augment = true;
};

/// Builds an episode for a given query; the support sample is drawn uniformly
/// and redrawn while its augmented mask is entirely ignored.
Episode make_episode(const LabeledSample& query, const SupportSet& support, const EpisodeOptions& options,
                     Rng& rng);

/// Draws a uniformly random query and a uniformly random support sample.
Episode sample_episode(const Dataset& query_dataset, const SupportSet& support, const EpisodeOptions& options,
                       Rng& rng);

/// Query samples in shuffled-epoch order, each paired with a random support sample.
class EpisodeStream {
 public:
  EpisodeStream(const Dataset& query_dataset, const SupportSet& support, EpisodeOptions options,
                std::uint64_t seed);

  Episode next();
  Rng& rng() { return rng_; }

 private:
  const Dataset& queries_;
  const SupportSet& support_;
  EpisodeOptions options_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

/// Procedural two-domain benchmark parameters. The first `n_stuff` classes are
/// stacked horizontal bands; the remaining classes are shapes drawn on top.
struct SyntheticDomainSpec {
  std::string name = "domain";
  int n_class = 12;
  int n_stuff = 4;
  int image_height = 128;
  int image_width = 128;
  std::vector<std::array<double, 3>> palette;
  double texture_noise_sigma = 0.05;
  std::vector<double> shape_density;
  std::vector<double> class_frequency;
  std::uint64_t seed = 0;
};

/// Default source-domain spec: 12 classes, 4 bands and 8 shape classes.
SyntheticDomainSpec default_source_spec();
/// Same layout statistics as the source with a different palette and noise level.
SyntheticDomainSpec default_target_spec();

LabeledSample render_synthetic_image(const SyntheticDomainSpec& spec, std::size_t index);
Dataset generate_synthetic_domain(const SyntheticDomainSpec& spec, int n_images);

void to_json(nlohmann::json& j, const SyntheticDomainSpec& spec);
void from_json(const nlohmann::json& j, SyntheticDomainSpec& spec);

/// Writes images/, masks/ and a manifest.json under `directory`.
void write_dataset(const std::string& directory, const Dataset& dataset, int n_class);

struct LoadedDataset {
  Dataset samples;
  int n_class = 0;
};

LoadedDataset load_dataset(const std::string& manifest_path);

/// Support manifest: subset of a dataset manifest plus the occurrence array.
void save_support_set(const std::string& path, const SupportSet& support, const std::string& dataset_manifest);
SupportSet load_support_set(const std::string& path);

}  // namespace fsda
