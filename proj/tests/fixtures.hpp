#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <random>
#include <vector>

#include "fsda/data.hpp"
#include "fsda/model.hpp"
#include "fsda/training.hpp"
#include "oracles.hpp"

namespace fixtures {

// Two blocks, one stride-2 pooling, small refinement module.
inline fsda::EncoderConfig mini_encoder() {
  fsda::EncoderConfig c;
  c.block_channels = {4, 6};
  c.dilations = {1, 2};
  c.convs_per_block = {1, 1};
  c.downsample_after = {1};
  c.frm_mid_block = 1;
  c.frm_output_dim = 8;
  c.pyramid_bin_sizes = {1, 2};
  return c;
}

// A 16x16 episode whose three support classes survive at feature resolution.
inline fsda::Episode mini_episode(std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  auto blocks = [](int a, int b, int c) {
    fsda::LabelMask m(16, 16);
    for (int y = 0; y < 16; ++y) {
      for (int x = 0; x < 16; ++x) m.at(y, x) = static_cast<std::uint8_t>(y < 8 ? a : (x < 8 ? b : c));
    }
    return m;
  };
  fsda::LabelMask support = blocks(2, 5, 9);
  fsda::LabelMask query = blocks(9, 2, 7);
  support.at(0, 0) = 255;
  query.at(15, 15) = 255;
  const auto r = fsda::remap_episode_labels(support, query);
  fsda::Episode e;
  e.support = {oracle::random_tensor(gen, 16, 16, 3, 0, 1), r.support, "support"};
  e.query = {oracle::random_tensor(gen, 16, 16, 3, 0, 1), r.query, "query"};
  e.class_set = r.class_set;
  return e;
}

// A default-resolution episode built from the synthetic source and target domains.
inline fsda::Episode synthetic_episode() {
  const auto target = fsda::generate_synthetic_domain(fsda::default_target_spec(), 2);
  const auto source = fsda::generate_synthetic_domain(fsda::default_source_spec(), 1);
  fsda::Rng rng(5);
  fsda::SupportSet support;
  support.samples = {target[0]};
  support.indices = {0};
  return fsda::make_episode(source[0], support, fsda::EpisodeOptions{}, rng);
}

struct GradientCheck {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  std::string worst;
};

// Central differences of the total episode loss against train_step, for
// every trainable scalar. Relative error is |a - n| / max(|a|, |n|, floor).
inline GradientCheck check_gradients(fsda::Model model, const fsda::Episode& episode,
                                     const fsda::TrainConfig& config, double step = 1e-5,
                                     double floor = 1e-7) {
  const fsda::StepResult analytic = fsda::train_step(model, episode, config);
  GradientCheck result;
  auto& params = model.parameters();
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (!params[p].trainable) continue;
    for (std::size_t i = 0; i < params[p].values.size(); ++i) {
      const double w = params[p].values[i];
      params[p].values[i] = w + step;
      const double plus = fsda::episode_loss(model, episode, config).loss_total;
      params[p].values[i] = w - step;
      const double minus = fsda::episode_loss(model, episode, config).loss_total;
      params[p].values[i] = w;
      const double numeric = (plus - minus) / (2 * step);
      const double a = analytic.gradients[p][i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      if (rel > result.max_relative_error) {
        result.max_relative_error = rel;
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%s[%zu] analytic %.9e numeric %.9e", params[p].name.c_str(), i, a,
                      numeric);
        result.worst = buf;
      }
      ++result.checked;
    }
  }
  return result;
}

}  // namespace fixtures
