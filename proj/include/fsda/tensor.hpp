#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "fsda/common.hpp"

namespace fsda {

/// Dense H x W x C array, row-major with channels innermost (HWC).
struct Tensor {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<double> data;

  Tensor() = default;
  Tensor(int h, int w, int c, double fill = 0.0)
      : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, fill) {}

  std::size_t pixels() const { return static_cast<std::size_t>(height) * width; }

  double& at(int y, int x, int c) { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  double at(int y, int x, int c) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }

  std::span<double> pixel(std::size_t index) {
    return {data.data() + index * channels, static_cast<std::size_t>(channels)};
  }
  std::span<const double> pixel(std::size_t index) const {
    return {data.data() + index * channels, static_cast<std::size_t>(channels)};
  }

  bool same_shape(const Tensor& other) const {
    return height == other.height && width == other.width && channels == other.channels;
  }

  bool operator==(const Tensor&) const = default;
};

/// H x W x 3 image with channel values in [0, 1].
using ImageTensor = Tensor;

/// H x W class-id mask; valid ids are small integers, kIgnoreLabel marks ignore.
struct LabelMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;

  LabelMask() = default;
  LabelMask(int h, int w, std::uint8_t fill = 0)
      : height(h), width(w), data(static_cast<std::size_t>(h) * w, fill) {}

  std::size_t pixels() const { return data.size(); }
  std::uint8_t& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }

  bool operator==(const LabelMask&) const = default;
};

/// Encoder output: h x w x D embedding plus its stride relative to the input.
struct FeatureMap {
  Tensor values;
  int stride = 1;

  int dim() const { return values.channels; }
};

/// Sorted distinct non-ignore labels of a mask.
std::vector<int> unique_labels(const LabelMask& mask);

/// Bilinear resize with half-pixel centers and edge clamping.
Tensor resize_bilinear(const Tensor& input, int out_height, int out_width);

/// Adjoint of resize_bilinear: maps a gradient w.r.t. the resized output back
/// onto the (in_height x in_width) input grid.
Tensor resize_bilinear_adjoint(const Tensor& grad_output, int in_height, int in_width);

/// Nearest-neighbour resize; never invents labels.
LabelMask resize_nearest(const LabelMask& mask, int out_height, int out_width);

}  // namespace fsda
