#include "fsda/model.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

namespace fsda {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

// Products always run on owned, Eigen-aligned copies. Eigen's vectorised
// kernels peel leading elements based on the buffer address, so operating on
// std::vector storage directly would make the rounding depend on the heap.
RowMatrix to_matrix(const double* data, Eigen::Index rows, Eigen::Index cols) {
  return ConstMatrixMap(data, rows, cols);
}
RowMatrix to_matrix(const Tensor& t) {
  return to_matrix(t.data.data(), static_cast<Eigen::Index>(t.pixels()), t.channels);
}
RowMatrix weight_matrix(const Parameter& p) { return to_matrix(p.values.data(), p.shape[0], p.shape[1]); }

void copy_into(const RowMatrix& m, double* dst) { std::memcpy(dst, m.data(), sizeof(double) * m.size()); }

/// Rows are output pixels, columns are (ky, kx, channel) taps; zero padding.
RowMatrix im2col(const Tensor& input, int kernel, int dilation) {
  const int h = input.height;
  const int w = input.width;
  const int c = input.channels;
  const int pad = dilation * (kernel - 1) / 2;
  RowMatrix cols = RowMatrix::Zero(static_cast<Eigen::Index>(h) * w, static_cast<Eigen::Index>(kernel) * kernel * c);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double* row = cols.data() + (static_cast<std::size_t>(y) * w + x) * cols.cols();
      for (int ky = 0; ky < kernel; ++ky) {
        const int sy = y + ky * dilation - pad;
        if (sy < 0 || sy >= h) continue;
        for (int kx = 0; kx < kernel; ++kx) {
          const int sx = x + kx * dilation - pad;
          if (sx < 0 || sx >= w) continue;
          std::memcpy(row + (ky * kernel + kx) * c, &input.data[(static_cast<std::size_t>(sy) * w + sx) * c],
                      sizeof(double) * c);
        }
      }
    }
  }
  return cols;
}

void col2im_add(const RowMatrix& cols, int kernel, int dilation, Tensor& grad_input) {
  const int h = grad_input.height;
  const int w = grad_input.width;
  const int c = grad_input.channels;
  const int pad = dilation * (kernel - 1) / 2;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double* row = cols.data() + (static_cast<std::size_t>(y) * w + x) * cols.cols();
      for (int ky = 0; ky < kernel; ++ky) {
        const int sy = y + ky * dilation - pad;
        if (sy < 0 || sy >= h) continue;
        for (int kx = 0; kx < kernel; ++kx) {
          const int sx = x + kx * dilation - pad;
          if (sx < 0 || sx >= w) continue;
          double* dst = &grad_input.data[(static_cast<std::size_t>(sy) * w + sx) * c];
          const double* src = row + (ky * kernel + kx) * c;
          for (int k = 0; k < c; ++k) dst[k] += src[k];
        }
      }
    }
  }
}

Tensor conv_forward(const Tensor& input, const Parameter& weight, const Parameter& bias, int kernel,
                    int dilation) {
  const int out_channels = weight.shape[1];
  RowMatrix out_m = (kernel == 1 ? to_matrix(input) : im2col(input, kernel, dilation)) * weight_matrix(weight);
  for (Eigen::Index r = 0; r < out_m.rows(); ++r) {
    for (int c = 0; c < out_channels; ++c) out_m(r, c) += bias.values[c];
  }
  Tensor out(input.height, input.width, out_channels);
  copy_into(out_m, out.data.data());
  return out;
}

/// grad_out is d(loss)/d(pre-activation). Returns d(loss)/d(input) when requested.
Tensor conv_backward(const Tensor& input, const Tensor& grad_out, const Parameter& weight, int kernel,
                     int dilation, std::vector<double>* grad_weight, std::vector<double>* grad_bias,
                     bool need_input_grad) {
  const RowMatrix g = to_matrix(grad_out);
  const RowMatrix cols = kernel == 1 ? to_matrix(input) : im2col(input, kernel, dilation);
  if (grad_weight) {
    const RowMatrix gw = cols.transpose() * g;
    for (Eigen::Index i = 0; i < gw.size(); ++i) (*grad_weight)[i] += gw.data()[i];
  }
  if (grad_bias) {
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      for (Eigen::Index c = 0; c < g.cols(); ++c) (*grad_bias)[c] += g(r, c);
    }
  }
  Tensor grad_input;
  if (!need_input_grad) return grad_input;
  grad_input = Tensor(input.height, input.width, input.channels);
  const RowMatrix grad_cols = g * weight_matrix(weight).transpose();
  if (kernel == 1) {
    copy_into(grad_cols, grad_input.data.data());
  } else {
    col2im_add(grad_cols, kernel, dilation, grad_input);
  }
  return grad_input;
}

void relu_inplace(Tensor& t) {
  for (double& v : t.data) {
    if (v < 0.0) v = 0.0;
  }
}

void relu_backward_inplace(const Tensor& activated, Tensor& grad) {
  for (std::size_t i = 0; i < grad.data.size(); ++i) {
    if (activated.data[i] <= 0.0) grad.data[i] = 0.0;
  }
}

Tensor max_pool2(const Tensor& input, std::vector<std::size_t>& argmax) {
  const int oh = input.height / 2;
  const int ow = input.width / 2;
  const int c = input.channels;
  Tensor out(oh, ow, c);
  argmax.assign(out.data.size(), 0);
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      for (int k = 0; k < c; ++k) {
        std::size_t best = (static_cast<std::size_t>(2 * y) * input.width + 2 * x) * c + k;
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            const std::size_t idx = (static_cast<std::size_t>(2 * y + dy) * input.width + 2 * x + dx) * c + k;
            if (input.data[idx] > input.data[best]) best = idx;
          }
        }
        const std::size_t o = (static_cast<std::size_t>(y) * ow + x) * c + k;
        out.data[o] = input.data[best];
        argmax[o] = best;
      }
    }
  }
  return out;
}

Tensor concat_channels(const std::vector<const Tensor*>& parts) {
  int total = 0;
  for (const Tensor* p : parts) total += p->channels;
  const Tensor& first = *parts.front();
  Tensor out(first.height, first.width, total);
  for (std::size_t i = 0; i < first.pixels(); ++i) {
    double* dst = out.data.data() + i * total;
    for (const Tensor* p : parts) {
      std::memcpy(dst, p->data.data() + i * p->channels, sizeof(double) * p->channels);
      dst += p->channels;
    }
  }
  return out;
}

Tensor slice_channels(const Tensor& t, int begin, int count) {
  Tensor out(t.height, t.width, count);
  for (std::size_t i = 0; i < t.pixels(); ++i) {
    std::memcpy(out.data.data() + i * count, t.data.data() + i * t.channels + begin, sizeof(double) * count);
  }
  return out;
}

void add_inplace(Tensor& dst, const Tensor& src) {
  for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += src.data[i];
}

std::vector<int> vec_from_set(const std::set<int>& s) { return {s.begin(), s.end()}; }

}  // namespace

// ---------------------------------------------------------------------------
// Config

int EncoderConfig::pyramid_branch_channels() const {
  const int concat = block_channels.at(frm_mid_block - 1) + block_channels.back();
  return std::max(1, concat / 4);
}

void EncoderConfig::validate() const {
  const int b = num_blocks();
  if (b < 1) throw std::invalid_argument("encoder needs at least one block");
  if (static_cast<int>(dilations.size()) != b || static_cast<int>(convs_per_block.size()) != b) {
    throw std::invalid_argument("dilations and convs_per_block need one entry per block");
  }
  if (kernel_size < 1 || kernel_size % 2 == 0) throw std::invalid_argument("kernel_size must be odd");
  for (int i = 0; i < b; ++i) {
    if (block_channels[i] < 1 || dilations[i] < 1 || convs_per_block[i] < 1) {
      throw std::invalid_argument("block channels, dilations and conv counts must be positive");
    }
  }
  for (int d : downsample_after) {
    if (d < 1 || d > b) throw std::invalid_argument("downsample_after index out of range");
  }
  if (frozen_blocks < 0 || frozen_blocks > b) throw std::invalid_argument("frozen_blocks out of range");
  if (use_frm) {
    if (frm_mid_block < 1 || frm_mid_block > b) throw std::invalid_argument("frm_mid_block out of range");
    for (int d : downsample_after) {
      if (d > frm_mid_block) {
        throw std::invalid_argument("refinement inputs differ in resolution: downsampling after block " +
                                    std::to_string(d));
      }
    }
    if (frm_output_dim < 1) throw std::invalid_argument("frm_output_dim must be positive");
    for (int s : pyramid_bin_sizes) {
      if (s < 1) throw std::invalid_argument("pyramid bin sizes must be positive");
    }
  }
}

void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = nlohmann::json{{"in_channels", c.in_channels},
                     {"block_channels", c.block_channels},
                     {"dilations", c.dilations},
                     {"convs_per_block", c.convs_per_block},
                     {"downsample_after", vec_from_set(c.downsample_after)},
                     {"kernel_size", c.kernel_size},
                     {"use_frm", c.use_frm},
                     {"frm_mid_block", c.frm_mid_block},
                     {"frm_output_dim", c.frm_output_dim},
                     {"pyramid_bin_sizes", c.pyramid_bin_sizes},
                     {"frozen_blocks", c.frozen_blocks}};
}

void from_json(const nlohmann::json& j, EncoderConfig& c) {
  const EncoderConfig d;
  c.in_channels = j.value("in_channels", d.in_channels);
  c.block_channels = j.value("block_channels", d.block_channels);
  c.dilations = j.value("dilations", d.dilations);
  c.convs_per_block = j.value("convs_per_block", d.convs_per_block);
  const auto down = j.value("downsample_after", vec_from_set(d.downsample_after));
  c.downsample_after = std::set<int>(down.begin(), down.end());
  c.kernel_size = j.value("kernel_size", d.kernel_size);
  c.use_frm = j.value("use_frm", d.use_frm);
  c.frm_mid_block = j.value("frm_mid_block", d.frm_mid_block);
  c.frm_output_dim = j.value("frm_output_dim", d.frm_output_dim);
  c.pyramid_bin_sizes = j.value("pyramid_bin_sizes", d.pyramid_bin_sizes);
  c.frozen_blocks = j.value("frozen_blocks", d.frozen_blocks);
}

int receptive_field(const EncoderConfig& config) {
  int field = 1;
  int jump = 1;
  for (int b = 0; b < config.num_blocks(); ++b) {
    for (int j = 0; j < config.convs_per_block[b]; ++j) {
      field += (config.kernel_size - 1) * config.dilations[b] * jump;
    }
    if (config.downsample_after.count(b + 1)) {
      field += jump;
      jump *= 2;
    }
  }
  return field;
}

// ---------------------------------------------------------------------------
// Pooling helpers

Tensor adaptive_avg_pool(const Tensor& input, int bins) {
  Tensor out(bins, bins, input.channels);
  for (int by = 0; by < bins; ++by) {
    const int y0 = by * input.height / bins;
    const int y1 = ((by + 1) * input.height + bins - 1) / bins;
    for (int bx = 0; bx < bins; ++bx) {
      const int x0 = bx * input.width / bins;
      const int x1 = ((bx + 1) * input.width + bins - 1) / bins;
      const double inv = 1.0 / ((y1 - y0) * (x1 - x0));
      for (int y = y0; y < y1; ++y) {
        for (int x = x0; x < x1; ++x) {
          for (int k = 0; k < input.channels; ++k) out.at(by, bx, k) += input.at(y, x, k);
        }
      }
      for (int k = 0; k < input.channels; ++k) out.at(by, bx, k) *= inv;
    }
  }
  return out;
}

Tensor adaptive_avg_pool_adjoint(const Tensor& grad_output, int in_height, int in_width) {
  const int bins = grad_output.height;
  Tensor grad(in_height, in_width, grad_output.channels);
  for (int by = 0; by < bins; ++by) {
    const int y0 = by * in_height / bins;
    const int y1 = ((by + 1) * in_height + bins - 1) / bins;
    for (int bx = 0; bx < bins; ++bx) {
      const int x0 = bx * in_width / bins;
      const int x1 = ((bx + 1) * in_width + bins - 1) / bins;
      const double inv = 1.0 / ((y1 - y0) * (x1 - x0));
      for (int y = y0; y < y1; ++y) {
        for (int x = x0; x < x1; ++x) {
          for (int k = 0; k < grad.channels; ++k) grad.at(y, x, k) += grad_output.at(by, bx, k) * inv;
        }
      }
    }
  }
  return grad;
}

// ---------------------------------------------------------------------------
// Model

Model::Model(EncoderConfig config, int head_classes, std::uint64_t seed)
    : config_(std::move(config)), head_classes_(head_classes) {
  config_.validate();
  if (head_classes_ < 0) throw std::invalid_argument("head_classes must be >= 0");
  Rng rng(seed);
  auto add = [&](std::string name, int fan_in, int fan_out, double gain, bool trainable) {
    Parameter w{name + ".weight", {fan_in, fan_out}, std::vector<double>(static_cast<std::size_t>(fan_in) * fan_out),
                trainable};
    const double stddev = std::sqrt(gain / fan_in);
    for (double& v : w.values) v = stddev * rng.normal();
    params_.push_back(std::move(w));
    params_.push_back({name + ".bias", {fan_out}, std::vector<double>(fan_out, 0.0), trainable});
    return static_cast<int>(params_.size()) - 2;
  };

  int channels = config_.in_channels;
  const int k2 = config_.kernel_size * config_.kernel_size;
  for (int b = 0; b < config_.num_blocks(); ++b) {
    for (int j = 0; j < config_.convs_per_block[b]; ++j) {
      const std::string name = "block" + std::to_string(b + 1) + ".conv" + std::to_string(j + 1);
      conv_param_.push_back(add(name, k2 * channels, config_.block_channels[b], 2.0, b >= config_.frozen_blocks));
      conv_block_.push_back(b);
      channels = config_.block_channels[b];
    }
  }
  if (config_.use_frm) {
    const int concat = config_.block_channels[config_.frm_mid_block - 1] + config_.block_channels.back();
    const int branch = config_.pyramid_branch_channels();
    for (int s : config_.pyramid_bin_sizes) {
      branch_param_.push_back(add("frm.pyramid" + std::to_string(s), concat, branch, 2.0, true));
    }
    const int pyramid = concat + branch * static_cast<int>(config_.pyramid_bin_sizes.size());
    project_param_ = add("frm.project", pyramid, config_.frm_output_dim, 1.0, true);
  }
  if (head_classes_ > 0) head_param_ = add("head", config_.output_dim(), head_classes_, 1.0, true);
}

int Model::param_index(const std::string& name) const {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].name == name) return static_cast<int>(i);
  }
  throw std::out_of_range("no parameter named " + name);
}

const Parameter& Model::parameter(const std::string& name) const { return params_[param_index(name)]; }

Gradients Model::zero_gradients() const {
  Gradients grads;
  grads.reserve(params_.size());
  for (const auto& p : params_) grads.emplace_back(p.values.size(), 0.0);
  return grads;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.values.size();
  return n;
}

FeatureMap Model::encode(const ImageTensor& image) const {
  EncoderTape tape;
  return encode(image, tape);
}

FeatureMap Model::encode(const ImageTensor& image, EncoderTape& tape) const {
  const int stride = config_.output_stride();
  if (image.channels != config_.in_channels) throw std::invalid_argument("image channel count mismatch");
  if (image.height % stride != 0 || image.width % stride != 0) {
    throw std::invalid_argument("image size " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                                " is not divisible by the output stride " + std::to_string(stride));
  }
  tape = EncoderTape{};
  Tensor x = image;
  Tensor mid;
  std::size_t conv = 0;
  for (int b = 0; b < config_.num_blocks(); ++b) {
    for (int j = 0; j < config_.convs_per_block[b]; ++j, ++conv) {
      const int wi = conv_param_[conv];
      Tensor y = conv_forward(x, params_[wi], params_[wi + 1], config_.kernel_size, config_.dilations[b]);
      relu_inplace(y);
      tape.convs.push_back({std::move(x), y});
      x = std::move(y);
    }
    if (config_.downsample_after.count(b + 1)) {
      tape.pool_input_shape.emplace_back(x.height, x.width);
      tape.pool_argmax.emplace_back();
      x = max_pool2(x, tape.pool_argmax.back());
    }
    tape.block_out_height.push_back(x.height);
    tape.block_out_width.push_back(x.width);
    if (config_.use_frm && b + 1 == config_.frm_mid_block) mid = x;
  }
  FeatureMap out;
  out.stride = stride;
  out.values = config_.use_frm ? frm(mid, x, &tape) : std::move(x);
  return out;
}

Tensor Model::frm(const Tensor& mid, const Tensor& last, EncoderTape* tape) const {
  if (!config_.use_frm) throw std::logic_error("refinement module disabled in this configuration");
  if (mid.height != last.height || mid.width != last.width) {
    throw std::invalid_argument("refinement inputs differ in spatial size");
  }
  const int expected = config_.block_channels[config_.frm_mid_block - 1] + config_.block_channels.back();
  if (mid.channels + last.channels != expected) throw std::invalid_argument("refinement input channel mismatch");

  Tensor concat = concat_channels({&mid, &last});
  std::vector<Tensor> pooled;
  std::vector<Tensor> branch;
  std::vector<Tensor> upsampled;
  for (std::size_t i = 0; i < config_.pyramid_bin_sizes.size(); ++i) {
    pooled.push_back(adaptive_avg_pool(concat, config_.pyramid_bin_sizes[i]));
    const int wi = branch_param_[i];
    Tensor br = conv_forward(pooled.back(), params_[wi], params_[wi + 1], 1, 1);
    relu_inplace(br);
    upsampled.push_back(resize_bilinear(br, concat.height, concat.width));
    branch.push_back(std::move(br));
  }
  std::vector<const Tensor*> parts{&concat};
  for (const auto& u : upsampled) parts.push_back(&u);
  Tensor pyramid = concat_channels(parts);
  Tensor out = conv_forward(pyramid, params_[project_param_], params_[project_param_ + 1], 1, 1);
  if (tape) {
    tape->concat = std::move(concat);
    tape->pooled = std::move(pooled);
    tape->branch = std::move(branch);
    tape->pyramid = std::move(pyramid);
  }
  return out;
}

void Model::backward(const EncoderTape& tape, const Tensor& grad_features, Gradients& grads) const {
  Tensor grad = grad_features;
  Tensor grad_mid;
  if (config_.use_frm) {
    const Parameter& pw = params_[project_param_];
    Tensor grad_pyramid = conv_backward(tape.pyramid, grad, pw, 1, 1, &grads[project_param_],
                                        &grads[project_param_ + 1], true);
    const int concat_channels_count = tape.concat.channels;
    Tensor grad_concat = slice_channels(grad_pyramid, 0, concat_channels_count);
    int offset = concat_channels_count;
    for (std::size_t i = 0; i < config_.pyramid_bin_sizes.size(); ++i) {
      const int wi = branch_param_[i];
      const int width = params_[wi].shape[1];
      Tensor grad_up = slice_channels(grad_pyramid, offset, width);
      offset += width;
      const int bins = config_.pyramid_bin_sizes[i];
      Tensor grad_branch = resize_bilinear_adjoint(grad_up, bins, bins);
      relu_backward_inplace(tape.branch[i], grad_branch);
      Tensor grad_pooled =
          conv_backward(tape.pooled[i], grad_branch, params_[wi], 1, 1, &grads[wi], &grads[wi + 1], true);
      add_inplace(grad_concat, adaptive_avg_pool_adjoint(grad_pooled, tape.concat.height, tape.concat.width));
    }
    const int mid_channels = config_.block_channels[config_.frm_mid_block - 1];
    grad_mid = slice_channels(grad_concat, 0, mid_channels);
    grad = slice_channels(grad_concat, mid_channels, grad_concat.channels - mid_channels);
  }

  int conv = static_cast<int>(tape.convs.size()) - 1;
  int pool = static_cast<int>(tape.pool_argmax.size()) - 1;
  for (int b = config_.num_blocks() - 1; b >= 0; --b) {
    if (b < config_.frozen_blocks) break;  // nothing upstream is trainable
    if (config_.use_frm && b + 1 == config_.frm_mid_block) add_inplace(grad, grad_mid);
    if (config_.downsample_after.count(b + 1)) {
      const auto [ih, iw] = tape.pool_input_shape[pool];
      Tensor unpooled(ih, iw, grad.channels);
      const auto& argmax = tape.pool_argmax[pool];
      for (std::size_t i = 0; i < grad.data.size(); ++i) unpooled.data[argmax[i]] += grad.data[i];
      grad = std::move(unpooled);
      --pool;
    }
    for (int j = config_.convs_per_block[b] - 1; j >= 0; --j, --conv) {
      const auto& record = tape.convs[conv];
      relu_backward_inplace(record.output, grad);
      const int wi = conv_param_[conv];
      const bool first = conv == 0;
      const bool more_trainable = b > config_.frozen_blocks || j > 0;
      grad = conv_backward(record.input, grad, params_[wi], config_.kernel_size, config_.dilations[b], &grads[wi],
                           &grads[wi + 1], !first && more_trainable);
    }
  }
}

Tensor Model::head_logits(const FeatureMap& features) const {
  if (head_param_ < 0) throw std::logic_error("model has no classifier head");
  return conv_forward(features.values, params_[head_param_], params_[head_param_ + 1], 1, 1);
}

Tensor Model::head_backward(const FeatureMap& features, const Tensor& grad_logits, Gradients& grads) const {
  if (head_param_ < 0) throw std::logic_error("model has no classifier head");
  return conv_backward(features.values, grad_logits, params_[head_param_], 1, 1, &grads[head_param_],
                       &grads[head_param_ + 1], true);
}

bool Model::operator==(const Model& other) const {
  if (!(config_ == other.config_) || head_classes_ != other.head_classes_ ||
      params_.size() != other.params_.size()) {
    return false;
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].name != other.params_[i].name || params_[i].shape != other.params_[i].shape ||
        params_[i].values != other.params_[i].values) {
      return false;
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kCheckpointMagic[8] = {'F', 'S', 'D', 'A', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void put(std::string& out, const T& value) {
  out.append(reinterpret_cast<const char*>(&value), sizeof(T));
}

class Reader {
 public:
  Reader(const std::string& bytes, std::string path) : bytes_(bytes), path_(std::move(path)) {}

  template <typename T>
  T get() {
    T value;
    read(&value, sizeof(T));
    return value;
  }
  void read(void* dst, std::size_t n) {
    if (n > bytes_.size() - pos_) throw IntegrityError(path_ + ": unexpected end of file");
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::string string(std::size_t n) {
    std::string s(n, '\0');
    read(s.data(), n);
    return s;
  }
  std::size_t position() const { return pos_; }

 private:
  const std::string& bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::string& path, const Model& model) {
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  put(out, kCheckpointVersion);
  const std::string config = nlohmann::json(model.config()).dump();
  put(out, static_cast<std::uint64_t>(config.size()));
  out += config;
  put(out, static_cast<std::int32_t>(model.head_classes()));
  put(out, static_cast<std::uint32_t>(model.parameters().size()));
  for (const auto& p : model.parameters()) {
    put(out, static_cast<std::uint32_t>(p.name.size()));
    out += p.name;
    put(out, static_cast<std::uint32_t>(p.shape.size()));
    for (int d : p.shape) put(out, static_cast<std::int32_t>(d));
    put(out, static_cast<std::uint8_t>(p.trainable));
    put(out, static_cast<std::uint64_t>(p.values.size()));
    out.append(reinterpret_cast<const char*>(p.values.data()), sizeof(double) * p.values.size());
  }
  out += sha256_hex(out);
  std::ofstream file(path, std::ios::binary);
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!file) throw Error("failed to write checkpoint " + path);
}

Model load_checkpoint(const std::string& path, const EncoderConfig* expected) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw Error("cannot open checkpoint " + path);
  const std::string bytes((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
  constexpr std::size_t kDigest = 64;
  if (bytes.size() < sizeof(kCheckpointMagic) + kDigest ||
      std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw IntegrityError(path + " is not a checkpoint");
  }
  const std::string body = bytes.substr(0, bytes.size() - kDigest);
  if (sha256_hex(body) != bytes.substr(bytes.size() - kDigest)) {
    throw IntegrityError(path + ": checksum mismatch (truncated or corrupt)");
  }
  Reader in(body, path);
  in.string(sizeof(kCheckpointMagic));
  const auto version = in.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw IntegrityError(path + ": unsupported checkpoint version " + std::to_string(version));
  }
  const auto config_size = in.get<std::uint64_t>();
  const EncoderConfig config = nlohmann::json::parse(in.string(config_size)).get<EncoderConfig>();
  if (expected && !(*expected == config)) {
    throw ConfigMismatch(path + ": encoder configuration differs from the expected one");
  }
  const int head = in.get<std::int32_t>();
  Model model(config, head, 0);
  const auto count = in.get<std::uint32_t>();
  if (count != model.parameters().size()) throw ConfigMismatch(path + ": parameter count mismatch");
  for (auto& p : model.parameters()) {
    const std::string name = in.string(in.get<std::uint32_t>());
    std::vector<int> shape(in.get<std::uint32_t>());
    for (int& d : shape) d = in.get<std::int32_t>();
    if (name != p.name || shape != p.shape) throw ConfigMismatch(path + ": unexpected parameter " + name);
    p.trainable = in.get<std::uint8_t>() != 0;
    const auto n = in.get<std::uint64_t>();
    if (n != p.values.size()) throw ConfigMismatch(path + ": size mismatch for " + name);
    in.read(p.values.data(), sizeof(double) * n);
  }
  if (in.position() != body.size()) throw IntegrityError(path + ": trailing bytes");
  return model;
}

}  // namespace fsda
