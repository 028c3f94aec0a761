#include "fsda/tensor.hpp"

#include <algorithm>
#include <array>
#include <cmath>

namespace fsda {

namespace {

struct Tap {
  int lo;
  int hi;
  double frac;  // weight of hi
};

std::vector<Tap> bilinear_taps(int in_size, int out_size) {
  std::vector<Tap> taps(out_size);
  const double scale = static_cast<double>(in_size) / out_size;
  for (int i = 0; i < out_size; ++i) {
    double src = (i + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in_size - 1));
    const int lo = static_cast<int>(std::floor(src));
    const int hi = std::min(lo + 1, in_size - 1);
    taps[i] = {lo, hi, src - lo};
  }
  return taps;
}

}  // namespace

std::vector<int> unique_labels(const LabelMask& mask) {
  std::array<bool, 256> seen{};
  for (std::uint8_t v : mask.data) seen[v] = true;
  std::vector<int> labels;
  for (int v = 0; v < 256; ++v) {
    if (seen[v] && v != kIgnoreLabel) labels.push_back(v);
  }
  return labels;
}

Tensor resize_bilinear(const Tensor& input, int out_height, int out_width) {
  if (input.height == out_height && input.width == out_width) return input;
  const auto ty = bilinear_taps(input.height, out_height);
  const auto tx = bilinear_taps(input.width, out_width);
  const int c = input.channels;
  Tensor out(out_height, out_width, c);
  for (int y = 0; y < out_height; ++y) {
    const Tap& a = ty[y];
    for (int x = 0; x < out_width; ++x) {
      const Tap& b = tx[x];
      const double w00 = (1 - a.frac) * (1 - b.frac);
      const double w01 = (1 - a.frac) * b.frac;
      const double w10 = a.frac * (1 - b.frac);
      const double w11 = a.frac * b.frac;
      const double* p00 = &input.data[(static_cast<std::size_t>(a.lo) * input.width + b.lo) * c];
      const double* p01 = &input.data[(static_cast<std::size_t>(a.lo) * input.width + b.hi) * c];
      const double* p10 = &input.data[(static_cast<std::size_t>(a.hi) * input.width + b.lo) * c];
      const double* p11 = &input.data[(static_cast<std::size_t>(a.hi) * input.width + b.hi) * c];
      double* dst = &out.data[(static_cast<std::size_t>(y) * out_width + x) * c];
      for (int k = 0; k < c; ++k) {
        dst[k] = w00 * p00[k] + w01 * p01[k] + w10 * p10[k] + w11 * p11[k];
      }
    }
  }
  return out;
}

Tensor resize_bilinear_adjoint(const Tensor& grad_output, int in_height, int in_width) {
  if (grad_output.height == in_height && grad_output.width == in_width) return grad_output;
  const auto ty = bilinear_taps(in_height, grad_output.height);
  const auto tx = bilinear_taps(in_width, grad_output.width);
  const int c = grad_output.channels;
  Tensor grad(in_height, in_width, c);
  for (int y = 0; y < grad_output.height; ++y) {
    const Tap& a = ty[y];
    for (int x = 0; x < grad_output.width; ++x) {
      const Tap& b = tx[x];
      const double w00 = (1 - a.frac) * (1 - b.frac);
      const double w01 = (1 - a.frac) * b.frac;
      const double w10 = a.frac * (1 - b.frac);
      const double w11 = a.frac * b.frac;
      const double* src = &grad_output.data[(static_cast<std::size_t>(y) * grad_output.width + x) * c];
      double* p00 = &grad.data[(static_cast<std::size_t>(a.lo) * in_width + b.lo) * c];
      double* p01 = &grad.data[(static_cast<std::size_t>(a.lo) * in_width + b.hi) * c];
      double* p10 = &grad.data[(static_cast<std::size_t>(a.hi) * in_width + b.lo) * c];
      double* p11 = &grad.data[(static_cast<std::size_t>(a.hi) * in_width + b.hi) * c];
      for (int k = 0; k < c; ++k) {
        p00[k] += w00 * src[k];
        p01[k] += w01 * src[k];
        p10[k] += w10 * src[k];
        p11[k] += w11 * src[k];
      }
    }
  }
  return grad;
}

LabelMask resize_nearest(const LabelMask& mask, int out_height, int out_width) {
  if (mask.height == out_height && mask.width == out_width) return mask;
  LabelMask out(out_height, out_width);
  std::vector<int> xs(out_width);
  for (int x = 0; x < out_width; ++x) {
    xs[x] = std::min(static_cast<int>((x + 0.5) * mask.width / out_width), mask.width - 1);
  }
  for (int y = 0; y < out_height; ++y) {
    const int sy = std::min(static_cast<int>((y + 0.5) * mask.height / out_height), mask.height - 1);
    for (int x = 0; x < out_width; ++x) out.at(y, x) = mask.at(sy, xs[x]);
  }
  return out;
}

}  // namespace fsda
