#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fsda/tensor.hpp"

namespace fsda {

/// Backbone and refinement-module layout. Block indices are 1-based.
struct EncoderConfig {
  int in_channels = 3;
  std::vector<int> block_channels{16, 32, 64, 64, 64};
  std::vector<int> dilations{1, 1, 1, 2, 4};
  std::vector<int> convs_per_block{1, 1, 1, 1, 1};
  std::set<int> downsample_after{1, 2, 3};
  int kernel_size = 3;
  bool use_frm = true;
  int frm_mid_block = 3;  // concatenated with the last block
  int frm_output_dim = 64;
  std::vector<int> pyramid_bin_sizes{1, 2, 3, 6};
  int frozen_blocks = 0;  // leading blocks excluded from updates

  int num_blocks() const { return static_cast<int>(block_channels.size()); }
  int output_stride() const { return 1 << downsample_after.size(); }
  int output_dim() const { return use_frm ? frm_output_dim : block_channels.back(); }
  /// Channels of each pyramid branch: a quarter of the concatenated input.
  int pyramid_branch_channels() const;

  /// Throws std::invalid_argument on an inconsistent layout.
  void validate() const;

  bool operator==(const EncoderConfig&) const = default;
};

void to_json(nlohmann::json& j, const EncoderConfig& config);
void from_json(const nlohmann::json& j, EncoderConfig& config);

/// Receptive field (in input pixels) of one output cell of the last block.
int receptive_field(const EncoderConfig& config);

struct Parameter {
  std::string name;
  std::vector<int> shape;
  std::vector<double> values;
  bool trainable = true;
};

/// One gradient buffer per parameter, in parameter order.
using Gradients = std::vector<std::vector<double>>;

/// Activations recorded by a forward pass, consumed by backward.
struct EncoderTape {
  struct ConvRecord {
    Tensor input;
    Tensor output;  // post-activation
  };
  std::vector<ConvRecord> convs;
  std::vector<std::vector<std::size_t>> pool_argmax;  // per downsampling block
  std::vector<std::pair<int, int>> pool_input_shape;
  std::vector<int> block_out_height;
  std::vector<int> block_out_width;
  // Refinement module.
  Tensor concat;
  std::vector<Tensor> pooled;
  std::vector<Tensor> branch;  // post-activation at bin resolution
  Tensor pyramid;              // concat + upsampled branches
};

/// Encoder (shared by support and query branches) plus an optional linear
/// per-pixel classifier used by the conventional baselines.
class Model {
 public:
  Model() = default;
  /// Seeded normal initialisation scaled by fan-in.
  Model(EncoderConfig config, int head_classes, std::uint64_t seed);

  const EncoderConfig& config() const { return config_; }
  int head_classes() const { return head_classes_; }
  int output_dim() const { return config_.output_dim(); }
  int output_stride() const { return config_.output_stride(); }

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  const Parameter& parameter(const std::string& name) const;
  Gradients zero_gradients() const;
  std::size_t parameter_count() const;

  FeatureMap encode(const ImageTensor& image) const;
  /// Records activations into `tape` for a later backward pass.
  FeatureMap encode(const ImageTensor& image, EncoderTape& tape) const;
  /// Accumulates parameter gradients given d(loss)/d(features).
  void backward(const EncoderTape& tape, const Tensor& grad_features, Gradients& grads) const;

  /// Per-pixel class scores w^T x + b at feature resolution.
  Tensor head_logits(const FeatureMap& features) const;
  /// Accumulates head gradients and returns d(loss)/d(features).
  Tensor head_backward(const FeatureMap& features, const Tensor& grad_logits, Gradients& grads) const;

  /// Refinement module over two equally sized block outputs: channel
  /// concatenation, pyramid pooling (adaptive average pool, 1x1 conv, ReLU,
  /// bilinear upsample, concatenation) and a 1x1 projection to output_dim.
  Tensor frm(const Tensor& mid, const Tensor& last, EncoderTape* tape = nullptr) const;

  bool operator==(const Model&) const;

 private:
  int param_index(const std::string& name) const;

  EncoderConfig config_;
  int head_classes_ = 0;
  std::vector<Parameter> params_;
  std::vector<int> conv_param_;   // weight index per conv, bias follows
  std::vector<int> conv_block_;   // block of each conv
  std::vector<int> branch_param_;
  int project_param_ = -1;
  int head_param_ = -1;
};

/// Adaptive average pooling to bins x bins cells (floor/ceil cell bounds).
Tensor adaptive_avg_pool(const Tensor& input, int bins);
Tensor adaptive_avg_pool_adjoint(const Tensor& grad_output, int in_height, int in_width);

/// Versioned binary checkpoint with a JSON config echo and named arrays.
void save_checkpoint(const std::string& path, const Model& model);
/// Loads a checkpoint; with `expected` set, a differing encoder config is rejected.
Model load_checkpoint(const std::string& path, const EncoderConfig* expected = nullptr);

}  // namespace fsda
