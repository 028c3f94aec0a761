#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "fsda/data.hpp"
#include "fsda/model.hpp"
#include "fsda/training.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace fsda;

namespace {

EncoderConfig backbone_only() {
  EncoderConfig c;
  c.use_frm = false;
  return c;
}

double norm(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

TEST(Encoder, DefaultShapeArithmetic) {
  const Model model(EncoderConfig{}, 0, 1);
  std::mt19937_64 gen(0);
  const FeatureMap f = model.encode(oracle::random_tensor(gen, 128, 128, 3, 0, 1));
  EXPECT_EQ(f.values.height, 16);
  EXPECT_EQ(f.values.width, 16);
  EXPECT_EQ(f.dim(), 64);
  EXPECT_EQ(f.stride, 8);
  const FeatureMap g = model.encode(oracle::random_tensor(gen, 256, 256, 3, 0, 1));
  EXPECT_EQ(g.values.height, 32);
  EXPECT_EQ(g.values.width, 32);
  EXPECT_EQ(g.dim(), 64);
}

TEST(Encoder, ConfigDefaults) {
  const EncoderConfig c;
  EXPECT_EQ(c.block_channels, (std::vector<int>{16, 32, 64, 64, 64}));
  EXPECT_EQ(c.dilations, (std::vector<int>{1, 1, 1, 2, 4}));
  EXPECT_EQ(c.output_stride(), 8);
  EXPECT_EQ(c.pyramid_bin_sizes, (std::vector<int>{1, 2, 3, 6}));
  EXPECT_EQ(c.pyramid_branch_channels(), (64 + 64) / 4);
  EXPECT_NO_THROW(c.validate());
}

TEST(Encoder, ConfigJsonRoundTrip) {
  EncoderConfig c;
  c.frozen_blocks = 2;
  c.pyramid_bin_sizes = {1, 3};
  EXPECT_EQ(nlohmann::json(c).get<EncoderConfig>(), c);
}

TEST(Encoder, RejectsMismatchedRefinementResolution) {
  EncoderConfig c;
  c.downsample_after = {1, 2, 4};
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Encoder, IdenticalImagesGiveIdenticalFeatures) {
  const Model model(EncoderConfig{}, 0, 3);
  std::mt19937_64 gen(1);
  const Tensor img = oracle::random_tensor(gen, 64, 64, 3, 0, 1);
  EXPECT_EQ(model.encode(img).values, model.encode(img).values);
  EXPECT_EQ(model.encode(img).values, Model(EncoderConfig{}, 0, 3).encode(img).values);
}

TEST(Encoder, NonDivisibleInputThrows) {
  const Model model(EncoderConfig{}, 0, 1);
  EXPECT_THROW(model.encode(Tensor(60, 64, 3)), std::invalid_argument);
}

TEST(Encoder, ReceptiveFieldIndependentOfInputSize) {
  // The span of output cells touched by one input pixel matches the analytic
  // receptive field and does not depend on the image size.
  const EncoderConfig config = backbone_only();
  const Model model(config, 0, 5);
  const int rf = receptive_field(config);
  EXPECT_EQ(rf, 118);
  std::mt19937_64 gen(2);
  auto affected_span = [&](int size) {
    Tensor img = oracle::random_tensor(gen, size, size, 3, 0, 1);
    const Tensor base = model.encode(img).values;
    img.at(size / 2, size / 2, 0) += 1.0;
    const Tensor moved = model.encode(img).values;
    int lo = size, hi = -1;
    for (int x = 0; x < base.width; ++x) {
      for (int c = 0; c < base.channels; ++c) {
        if (base.at(base.height / 2, x, c) != moved.at(base.height / 2, x, c)) {
          lo = std::min(lo, x);
          hi = std::max(hi, x);
        }
      }
    }
    return hi - lo + 1;
  };
  const int span128 = affected_span(128);
  const int span256 = affected_span(256);
  EXPECT_EQ(span128, span256);
  EXPECT_LE((span128 - 1) * 8, rf);
}

TEST(Encoder, BackboneIsTranslationCovariantInTheInterior) {
  const Model model(backbone_only(), 0, 9);
  std::mt19937_64 gen(3);
  const int size = 256, stride = 8;
  const Tensor img = oracle::random_tensor(gen, size, size, 3, 0, 1);
  Tensor shifted = oracle::random_tensor(gen, size, size, 3, 0, 1);
  for (int y = 0; y < size; ++y) {
    for (int x = stride; x < size; ++x) {
      for (int c = 0; c < 3; ++c) shifted.at(y, x, c) = img.at(y, x - stride, c);
    }
  }
  const Tensor a = model.encode(img).values, b = model.encode(shifted).values;
  const int margin = (receptive_field(model.config()) / 2 + stride - 1) / stride + 1;
  for (int y = margin; y < a.height - margin; ++y) {
    for (int x = margin; x < a.width - margin - 1; ++x) {
      for (int c = 0; c < a.channels; ++c) EXPECT_NEAR(b.at(y, x + 1, c), a.at(y, x, c), 1e-12);
    }
  }
}

TEST(Refinement, GlobalBinOnConstantMapIsConstant) {
  const Tensor constant(6, 6, 4, 2.5);
  const Tensor pooled = adaptive_avg_pool(constant, 1);
  EXPECT_EQ(pooled.height, 1);
  for (double v : pooled.data) EXPECT_DOUBLE_EQ(v, 2.5);
  const Tensor up = resize_bilinear(pooled, 6, 6);
  for (double v : up.data) EXPECT_DOUBLE_EQ(v, 2.5);
}

TEST(Refinement, AdaptivePoolAdjointDotProduct) {
  std::mt19937_64 gen(4);
  const Tensor x = oracle::random_tensor(gen, 7, 5, 2);
  const Tensor y = oracle::random_tensor(gen, 3, 3, 2);
  const Tensor ax = adaptive_avg_pool(x, 3);
  const Tensor aty = adaptive_avg_pool_adjoint(y, 7, 5);
  double lhs = 0, rhs = 0;
  for (std::size_t i = 0; i < ax.data.size(); ++i) lhs += ax.data[i] * y.data[i];
  for (std::size_t i = 0; i < x.data.size(); ++i) rhs += x.data[i] * aty.data[i];
  EXPECT_NEAR(lhs, rhs, 1e-12);
}

TEST(Refinement, OutputWidthIsConfiguredDimension) {
  for (int dim : {8, 64, 100}) {
    EncoderConfig c;
    c.block_channels = {4, 6, 10, 12, 14};
    c.frm_output_dim = dim;
    const Model model(c, 0, 1);
    std::mt19937_64 gen(dim);
    const Tensor out = model.frm(oracle::random_tensor(gen, 5, 5, 10), oracle::random_tensor(gen, 5, 5, 14));
    EXPECT_EQ(out.channels, dim);
    EXPECT_EQ(out.height, 5);
  }
}

TEST(Refinement, SpatialMismatchThrows) {
  const Model model(EncoderConfig{}, 0, 1);
  EXPECT_THROW(model.frm(Tensor(4, 4, 64), Tensor(5, 4, 64)), std::invalid_argument);
}

TEST(Gradients, EveryParameterReceivesGradient) {
  const Episode e = fixtures::synthetic_episode();
  ASSERT_GE(e.n_way(), 2);
  const Model model(EncoderConfig{}, 0, 11);
  TrainConfig tc;
  tc.temperature = 20;
  const StepResult r = train_step(model, e, tc);
  ASSERT_EQ(r.gradients.size(), model.parameters().size());
  for (std::size_t i = 0; i < r.gradients.size(); ++i) {
    EXPECT_GT(norm(r.gradients[i]), 0.0) << model.parameters()[i].name;
  }
}

TEST(Gradients, FrozenBlocksReceiveNone) {
  const Episode e = fixtures::synthetic_episode();
  EncoderConfig c;
  c.frozen_blocks = 3;
  const Model model(c, 0, 11);
  const StepResult r = train_step(model, e, TrainConfig{});
  for (std::size_t i = 0; i < r.gradients.size(); ++i) {
    const auto& p = model.parameters()[i];
    const bool frozen = p.name.rfind("block1.", 0) == 0 || p.name.rfind("block2.", 0) == 0 ||
                        p.name.rfind("block3.", 0) == 0;
    EXPECT_EQ(p.trainable, !frozen) << p.name;
    if (frozen) {
      EXPECT_EQ(norm(r.gradients[i]), 0.0) << p.name;
    } else {
      EXPECT_GT(norm(r.gradients[i]), 0.0) << p.name;
    }
  }
}

TEST(Model, InitialisationIsSeeded) {
  EXPECT_TRUE(Model(EncoderConfig{}, 12, 4) == Model(EncoderConfig{}, 12, 4));
  EXPECT_FALSE(Model(EncoderConfig{}, 12, 4) == Model(EncoderConfig{}, 12, 5));
}

TEST(Model, HeadLogitsHaveOneChannelPerClass) {
  const Model model(EncoderConfig{}, 12, 1);
  std::mt19937_64 gen(0);
  const Tensor logits = model.head_logits(model.encode(oracle::random_tensor(gen, 32, 32, 3, 0, 1)));
  EXPECT_EQ(logits.channels, 12);
  EXPECT_EQ(logits.height, 4);
}

fs::path checkpoint_path(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "fsda_test_ckpt";
  fs::create_directories(dir);
  return dir / name;
}

TEST(Checkpoint, RoundTripIsExact) {
  const Model model(EncoderConfig{}, 12, 8);
  const auto path = checkpoint_path("round.ckpt").string();
  save_checkpoint(path, model);
  const Model back = load_checkpoint(path);
  EXPECT_TRUE(back == model);
  EXPECT_EQ(back.head_classes(), 12);
  const EncoderConfig expected;
  EXPECT_NO_THROW(load_checkpoint(path, &expected));
}

TEST(Checkpoint, RejectsConfigMismatch) {
  const Model model(EncoderConfig{}, 0, 8);
  const auto path = checkpoint_path("mismatch.ckpt").string();
  save_checkpoint(path, model);
  EncoderConfig other;
  other.frm_output_dim = 32;
  EXPECT_THROW(load_checkpoint(path, &other), ConfigMismatch);
}

TEST(Checkpoint, RejectsTruncatedAndCorruptFiles) {
  const Model model(EncoderConfig{}, 0, 8);
  const auto path = checkpoint_path("trunc.ckpt").string();
  save_checkpoint(path, model);
  const auto size = fs::file_size(path);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(static_cast<std::streamoff>(size / 2));
    f.put('\x7f');
  }
  EXPECT_THROW(load_checkpoint(path), IntegrityError);
  fs::resize_file(path, size / 3);
  EXPECT_THROW(load_checkpoint(path), IntegrityError);
  std::ofstream(checkpoint_path("garbage.ckpt")) << "not a checkpoint";
  EXPECT_THROW(load_checkpoint(checkpoint_path("garbage.ckpt").string()), IntegrityError);
}

}  // namespace
