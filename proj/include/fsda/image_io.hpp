#pragma once

#include <optional>
#include <string>

#include "fsda/tensor.hpp"

namespace fsda {

/// Reads a single-channel 8-bit PNG mask. With `n_class` set, every value must
/// be below it or equal to kIgnoreLabel.
LabelMask load_mask(const std::string& path, std::optional<int> n_class = std::nullopt);
void save_mask(const std::string& path, const LabelMask& mask);

/// Reads a 3-channel 8-bit PNG, normalised to [0, 1].
ImageTensor load_image(const std::string& path);
/// Writes a 3-channel image; values are clamped to [0, 1] and rounded to 8 bits.
void save_image(const std::string& path, const ImageTensor& image);

/// Writes a mask as an RGB visualisation using a fixed per-class colour table.
void save_color_mask(const std::string& path, const LabelMask& mask);

/// Throws unless every value is < n_class or kIgnoreLabel.
void validate_mask(const LabelMask& mask, int n_class);

}  // namespace fsda
