#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <random>
#include <set>

#include "fsda/data.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace fsda;

namespace {

LabeledSample sample_from_mask(const LabelMask& mask, const std::string& name) {
  LabeledSample s;
  s.mask = mask;
  s.image = Tensor(mask.height, mask.width, 3, 0.5);
  s.name = name;
  return s;
}

LabelMask mask_with_classes(std::initializer_list<int> classes, int h = 4, int w = 4) {
  LabelMask m(h, w, 255);
  int i = 0;
  for (int c : classes) m.data[i++] = static_cast<std::uint8_t>(c);
  return m;
}

Dataset random_dataset(std::mt19937_64& gen, int n, int n_class) {
  std::uniform_int_distribution<int> count(0, 4);
  std::uniform_int_distribution<int> label(0, n_class - 1);
  Dataset d;
  for (int i = 0; i < n; ++i) {
    LabelMask m(4, 4, 255);
    const int k = count(gen);
    for (int j = 0; j < k; ++j) m.data[j] = static_cast<std::uint8_t>(label(gen));
    d.push_back(sample_from_mask(m, "img" + std::to_string(i)));
  }
  return d;
}

// ---------------------------------------------------------------------------
// Support-set construction

TEST(SupportSet, FirstImageSaturatesSharedClasses) {
  Dataset d;
  for (int i = 0; i < 3; ++i) d.push_back(sample_from_mask(mask_with_classes({0, 1}), std::to_string(i)));
  const SupportSet s = construct_support_set(d, 1, 5, 123);
  EXPECT_EQ(s.size(), 1u);
  EXPECT_EQ(s.occurrence, (std::vector<int>{1, 1, 0, 0, 0}));
  EXPECT_EQ(s.unsaturated(), (std::vector<int>{2, 3, 4}));
}

TEST(SupportSet, MatchesStraightLineReplayOnSamePermutation) {
  std::mt19937_64 gen(17);
  for (int trial = 0; trial < 50; ++trial) {
    const Dataset d = random_dataset(gen, 50, 8);
    const std::uint64_t seed = gen();
    SupportSet s;
    try {
      s = construct_support_set(d, 3, 8, seed);
    } catch (const EmptySupport&) {
      continue;
    }
    std::vector<LabelMask> masks;
    for (const auto& x : d) masks.push_back(x.mask);
    const auto expected = oracle::replay_support(masks, support_permutation(d.size(), seed), 3, 8);
    EXPECT_EQ(s.indices, expected.admitted);
    EXPECT_EQ(s.occurrence, expected.occurrence);
    for (std::size_t i = 0; i < s.size(); ++i) EXPECT_EQ(s.samples[i].name, d[s.indices[i]].name);
  }
}

TEST(SupportSet, OccurrenceIsCappedAvailability) {
  std::mt19937_64 gen(4);
  const Dataset d = random_dataset(gen, 40, 6);
  std::vector<int> available(6, 0);
  for (const auto& x : d) {
    for (int c : unique_labels(x.mask)) ++available[c];
  }
  for (int k = 1; k <= 6; ++k) {
    const SupportSet s = construct_support_set(d, k, 6, 9);
    for (int c = 0; c < 6; ++c) EXPECT_EQ(s.occurrence[c], std::min(k, available[c]));
  }
}

TEST(SupportSet, LargerKNeverDropsImages) {
  std::mt19937_64 gen(8);
  const Dataset d = random_dataset(gen, 60, 10);
  std::set<std::size_t> previous;
  for (int k = 1; k <= 6; ++k) {
    const SupportSet s = construct_support_set(d, k, 10, 21);
    const std::set<std::size_t> current(s.indices.begin(), s.indices.end());
    for (auto i : previous) EXPECT_TRUE(current.count(i)) << "k=" << k;
    previous = current;
  }
}

TEST(SupportSet, EveryAdmittedImageContributed) {
  std::mt19937_64 gen(12);
  const Dataset d = random_dataset(gen, 50, 5);
  const SupportSet s = construct_support_set(d, 2, 5, 3);
  std::vector<int> occ(5, 0);
  for (const auto& sample : s.samples) {
    bool novel = false;
    for (int c : unique_labels(sample.mask)) {
      if (occ[c] < 2) {
        ++occ[c];
        novel = true;
      }
    }
    EXPECT_TRUE(novel);
  }
}

TEST(SupportSet, RejectsInvalidArguments) {
  Dataset d{sample_from_mask(mask_with_classes({0}), "a")};
  EXPECT_THROW(construct_support_set(d, 0, 3, 0), std::invalid_argument);
  EXPECT_THROW(construct_support_set(d, 1, 0, 0), std::invalid_argument);
  EXPECT_THROW(construct_support_set({}, 1, 3, 0), std::invalid_argument);
  Dataset ignored{sample_from_mask(LabelMask(4, 4, 255), "x")};
  EXPECT_THROW(construct_support_set(ignored, 1, 3, 0), EmptySupport);
}

TEST(SupportSet, DeterministicGivenSeed) {
  std::mt19937_64 gen(1);
  const Dataset d = random_dataset(gen, 30, 6);
  EXPECT_EQ(construct_support_set(d, 2, 6, 5).indices, construct_support_set(d, 2, 6, 5).indices);
}

// ---------------------------------------------------------------------------
// Label remapping

TEST(Remap, TwoClassExample) {
  LabelMask support(1, 3);
  support.data = {1, 7, 255};
  LabelMask query(1, 5);
  query.data = {1, 7, 3, 0, 255};
  const auto r = remap_episode_labels(support, query);
  EXPECT_EQ(r.class_set, (std::vector<int>{1, 7}));
  EXPECT_EQ(r.support.data, (std::vector<std::uint8_t>{0, 1, 255}));
  EXPECT_EQ(r.query.data, (std::vector<std::uint8_t>{0, 1, 255, 255, 255}));
}

TEST(Remap, SingleClassZeroIsIdentity) {
  const LabelMask m(3, 3, 0);
  const auto r = remap_episode_labels(m, m);
  EXPECT_EQ(r.support, m);
  EXPECT_EQ(r.query, m);
  EXPECT_EQ(r.class_set, (std::vector<int>{0}));
}

TEST(Remap, PartialOverlapRoundTrip) {
  LabelMask support(1, 3);
  support.data = {2, 5, 9};
  LabelMask query(1, 4);
  query.data = {0, 5, 9, 11};
  const auto r = remap_episode_labels(support, query);
  EXPECT_EQ(r.query.data, (std::vector<std::uint8_t>{255, 1, 2, 255}));
  const LabelMask back = restore_episode_labels(r.query, r.class_set);
  EXPECT_EQ(back.data, (std::vector<std::uint8_t>{255, 5, 9, 255}));
  EXPECT_EQ(restore_episode_labels(r.support, r.class_set), support);
}

TEST(Remap, AllIgnoredSupportThrows) {
  EXPECT_THROW(remap_episode_labels(LabelMask(2, 2, 255), LabelMask(2, 2, 0)), EmptySupport);
}

TEST(Remap, RandomPairsSatisfyInvariants) {
  std::mt19937_64 gen(99);
  for (int trial = 0; trial < 300; ++trial) {
    const LabelMask s = oracle::random_mask(gen, 5, 5, 12, 0.3);
    const LabelMask q = oracle::random_mask(gen, 6, 4, 12, 0.3);
    if (unique_labels(s).empty()) continue;
    const auto r = remap_episode_labels(s, q);
    const int n_way = static_cast<int>(r.class_set.size());
    for (auto v : r.support.data) EXPECT_TRUE(v == 255 || v < n_way);
    for (auto v : r.query.data) EXPECT_TRUE(v == 255 || v < n_way);
    const std::set<int> cst(r.class_set.begin(), r.class_set.end());
    EXPECT_EQ(cst.size(), r.class_set.size());
    for (std::size_t i = 0; i < q.data.size(); ++i) {
      if (q.data[i] != 255 && !cst.count(q.data[i])) EXPECT_EQ(r.query.data[i], 255);
    }
    const LabelMask back = restore_episode_labels(r.query, r.class_set);
    for (std::size_t i = 0; i < q.data.size(); ++i) {
      if (r.query.data[i] != 255) EXPECT_EQ(back.data[i], q.data[i]);
    }
  }
}

// ---------------------------------------------------------------------------
// Augmentation

LabeledSample gradient_sample(int h, int w) {
  LabeledSample s;
  s.image = Tensor(h, w, 3);
  s.mask = LabelMask(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) s.image.at(y, x, c) = (y * w + x + c) / static_cast<double>(h * w + 3);
      s.mask.at(y, x) = static_cast<std::uint8_t>((x / 3 + y / 4) % 5);
    }
  }
  s.name = "grad";
  return s;
}

TEST(Augment, IdentityParamsLeaveSampleUnchanged) {
  const LabeledSample s = gradient_sample(16, 20);
  const LabeledSample out = apply_augment(s, AugmentParams{}, 16, 20);
  EXPECT_EQ(out.mask, s.mask);
  for (std::size_t i = 0; i < s.image.data.size(); ++i) EXPECT_NEAR(out.image.data[i], s.image.data[i], 1e-12);
}

TEST(Augment, FlipOnlyReversesColumns) {
  const LabeledSample s = gradient_sample(12, 10);
  AugmentParams p;
  p.flip = true;
  const LabeledSample out = apply_augment(s, p, 12, 10);
  for (int y = 0; y < 12; ++y) {
    for (int x = 0; x < 10; ++x) EXPECT_EQ(out.mask.at(y, x), s.mask.at(y, 9 - x));
  }
}

TEST(Augment, NeverInventsLabels) {
  const LabeledSample s = gradient_sample(32, 32);
  const std::set<int> allowed = [&] {
    std::set<int> a(s.mask.data.begin(), s.mask.data.end());
    a.insert(255);
    return a;
  }();
  Rng rng(6);
  for (int i = 0; i < 100; ++i) {
    const LabeledSample out = augment(s, 24, 40, rng);
    EXPECT_EQ(out.mask.height, 24);
    EXPECT_EQ(out.mask.width, 40);
    for (auto v : out.mask.data) EXPECT_TRUE(allowed.count(v));
  }
}

TEST(Augment, OutOfFramePixelsAreIgnoredAndBlack) {
  const LabeledSample s = gradient_sample(8, 8);
  AugmentParams p;
  p.offset_y = -4;
  p.offset_x = -4;
  const LabeledSample out = apply_augment(s, p, 8, 8);
  EXPECT_EQ(out.mask.at(0, 0), 255);
  EXPECT_EQ(out.image.at(0, 0, 0), 0.0);
  EXPECT_EQ(out.mask.at(4, 4), s.mask.at(0, 0));
}

TEST(Augment, DrawnParametersRespectRanges) {
  Rng rng(2);
  for (int i = 0; i < 200; ++i) {
    const AugmentParams p = draw_augment_params(rng, 128, 128, 64, 64);
    EXPECT_GE(p.scale, 0.9);
    EXPECT_LE(p.scale, 1.1);
    EXPECT_GE(p.angle_deg, -10.0);
    EXPECT_LE(p.angle_deg, 10.0);
  }
}

// ---------------------------------------------------------------------------
// Episodes

SupportSet support_of(const Dataset& d, int n_class) {
  SupportSet s;
  s.samples = d;
  s.n_class = n_class;
  for (std::size_t i = 0; i < d.size(); ++i) s.indices.push_back(i);
  s.occurrence.assign(n_class, 1);
  return s;
}

TEST(Episode, SingleSupportIsAlwaysUsed) {
  LabelMask m(8, 8, 0);
  m.at(0, 0) = 3;
  m.at(5, 5) = 6;
  const SupportSet support = support_of({sample_from_mask(m, "only")}, 8);
  const Dataset queries{sample_from_mask(LabelMask(8, 8, 3), "q")};
  EpisodeOptions o;
  o.augment = false;
  o.crop_height = o.crop_width = 8;
  Rng rng(0);
  for (int i = 0; i < 10; ++i) {
    const Episode e = sample_episode(queries, support, o, rng);
    EXPECT_EQ(e.support.name, "only");
    EXPECT_EQ(e.n_way(), 3);
    EXPECT_EQ(e.class_set, (std::vector<int>{0, 3, 6}));
  }
}

TEST(Episode, StreamIsDeterministic) {
  const Dataset d = generate_synthetic_domain(default_source_spec(), 4);
  const SupportSet support = construct_support_set(generate_synthetic_domain(default_target_spec(), 6), 1, 12, 1);
  EpisodeStream a(d, support, EpisodeOptions{}, 77), b(d, support, EpisodeOptions{}, 77);
  for (int i = 0; i < 6; ++i) {
    const Episode x = a.next(), y = b.next();
    EXPECT_EQ(x.support.image, y.support.image);
    EXPECT_EQ(x.query.mask, y.query.mask);
    EXPECT_EQ(x.class_set, y.class_set);
  }
}

TEST(Episode, SupportSelectionIsUniform) {
  Dataset d;
  for (int i = 0; i < 33; ++i) d.push_back(sample_from_mask(LabelMask(8, 8, 0), "s" + std::to_string(i)));
  const SupportSet support = support_of(d, 1);
  const Dataset queries{sample_from_mask(LabelMask(8, 8, 0), "q")};
  EpisodeOptions o;
  o.augment = false;
  o.crop_height = o.crop_width = 8;
  Rng rng(2024);
  std::map<std::string, int> counts;
  const int n = 1000;
  for (int i = 0; i < n; ++i) ++counts[sample_episode(queries, support, o, rng).support.name];
  // Chi-square against the uniform multinomial; mean k-1, sd sqrt(2(k-1)).
  const double expected = n / 33.0;
  double chi2 = 0;
  for (const auto& x : d) {
    const double diff = counts[x.name] - expected;
    chi2 += diff * diff / expected;
  }
  EXPECT_LT(std::abs(chi2 - 32.0), 3.0 * std::sqrt(64.0));
}

TEST(Episode, DegenerateSupportRetriesThenFails) {
  const SupportSet support = support_of({sample_from_mask(LabelMask(8, 8, 255), "empty")}, 2);
  const Dataset queries{sample_from_mask(LabelMask(8, 8, 0), "q")};
  EpisodeOptions o;
  o.crop_height = o.crop_width = 8;
  Rng rng(1);
  EXPECT_THROW(sample_episode(queries, support, o, rng), EmptySupport);
}

// ---------------------------------------------------------------------------
// Synthetic benchmark

TEST(Synthetic, ConstantSingleClassFrame) {
  SyntheticDomainSpec spec;
  spec.n_class = 1;
  spec.n_stuff = 1;
  spec.image_height = spec.image_width = 16;
  spec.palette = {{0.2, 0.4, 0.6}};
  spec.texture_noise_sigma = 0.0;
  spec.shape_density = {0.0};
  spec.class_frequency = {1.0};
  const auto d = generate_synthetic_domain(spec, 2);
  for (const auto& s : d) {
    EXPECT_EQ(s.mask, LabelMask(16, 16, 0));
    for (int i = 0; i < 16 * 16; ++i) {
      EXPECT_EQ(s.image.data[3 * i], s.image.data[0]);
      EXPECT_EQ(s.image.data[3 * i + 2], s.image.data[2]);
    }
  }
}

TEST(Synthetic, DefaultSpecsHaveDistinctPalettes) {
  const auto src = default_source_spec(), tgt = default_target_spec();
  EXPECT_EQ(src.n_class, 12);
  EXPECT_EQ(src.n_stuff, 4);
  EXPECT_EQ(src.image_height, 128);
  EXPECT_NE(src.palette, tgt.palette);
}

TEST(Synthetic, ReproducibleGivenSeed) {
  const auto a = generate_synthetic_domain(default_target_spec(), 3);
  const auto b = generate_synthetic_domain(default_target_spec(), 3);
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(a[i].image, b[i].image);
    EXPECT_EQ(a[i].mask, b[i].mask);
  }
}

TEST(Synthetic, AlwaysPresentClassAppearsEverywhere) {
  auto spec = default_source_spec();
  spec.class_frequency[0] = 1.0;
  for (const auto& s : generate_synthetic_domain(spec, 30)) {
    const auto labels = unique_labels(s.mask);
    EXPECT_TRUE(std::find(labels.begin(), labels.end(), 0) != labels.end());
    EXPECT_EQ(std::count(s.mask.data.begin(), s.mask.data.end(), 255), 0);
  }
}

TEST(Synthetic, SeedChangesLayoutButNotStatistics) {
  auto a = default_source_spec(), b = default_source_spec();
  b.seed = a.seed + 1000;
  const int n = 200;
  const auto da = generate_synthetic_domain(a, n), db = generate_synthetic_domain(b, n);
  EXPECT_NE(da[0].mask, db[0].mask);
  for (int c = 0; c < a.n_class; ++c) {
    int ca = 0, cb = 0;
    for (int i = 0; i < n; ++i) {
      const auto la = unique_labels(da[i].mask), lb = unique_labels(db[i].mask);
      ca += std::count(la.begin(), la.end(), c);
      cb += std::count(lb.begin(), lb.end(), c);
    }
    const double pa = ca / double(n), pb = cb / double(n), p = (pa + pb) / 2;
    const double se = std::sqrt(p * (1 - p) * 2.0 / n);
    EXPECT_LE(std::abs(pa - pb), 3 * se + 1e-12) << "class " << c;
  }
}

TEST(Synthetic, PaletteLengthMismatchThrows) {
  auto spec = default_source_spec();
  spec.palette.pop_back();
  EXPECT_THROW(generate_synthetic_domain(spec, 1), std::invalid_argument);
}

TEST(Synthetic, SpecJsonRoundTrip) {
  const auto spec = default_target_spec();
  const SyntheticDomainSpec back = nlohmann::json(spec).get<SyntheticDomainSpec>();
  EXPECT_EQ(nlohmann::json(back), nlohmann::json(spec));
}

// ---------------------------------------------------------------------------
// Manifests

TEST(Manifest, DatasetRoundTrip) {
  const fs::path dir = fs::temp_directory_path() / "fsda_test_manifest";
  fs::remove_all(dir);
  const auto d = generate_synthetic_domain(default_target_spec(), 3);
  write_dataset(dir.string(), d, 12);
  const auto loaded = load_dataset((dir / "manifest.json").string());
  EXPECT_EQ(loaded.n_class, 12);
  ASSERT_EQ(loaded.samples.size(), 3u);
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(loaded.samples[i].image, d[i].image);
    EXPECT_EQ(loaded.samples[i].mask, d[i].mask);
    EXPECT_EQ(loaded.samples[i].name, d[i].name);
  }
}

TEST(Manifest, SupportSetRoundTrip) {
  const fs::path dir = fs::temp_directory_path() / "fsda_test_support_manifest";
  fs::remove_all(dir);
  const auto d = generate_synthetic_domain(default_target_spec(), 10);
  write_dataset(dir.string(), d, 12);
  const SupportSet s = construct_support_set(d, 2, 12, 4);
  save_support_set((dir / "support.json").string(), s, (dir / "manifest.json").string());
  const SupportSet back = load_support_set((dir / "support.json").string());
  EXPECT_EQ(back.indices, s.indices);
  EXPECT_EQ(back.occurrence, s.occurrence);
  EXPECT_EQ(back.k_shot, 2);
  ASSERT_EQ(back.size(), s.size());
  for (std::size_t i = 0; i < s.size(); ++i) EXPECT_EQ(back.samples[i].mask, s.samples[i].mask);
}

TEST(Manifest, MissingManifestThrows) { EXPECT_THROW(load_dataset("/nonexistent/manifest.json"), Error); }

}  // namespace
