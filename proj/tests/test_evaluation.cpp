#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "fsda/evaluation.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace fsda;

namespace {

ConfusionMatrix from_rows(const std::vector<std::vector<std::uint64_t>>& rows) {
  ConfusionMatrix m(static_cast<int>(rows.size()));
  for (std::size_t g = 0; g < rows.size(); ++g) {
    for (std::size_t p = 0; p < rows.size(); ++p) m.at(static_cast<int>(g), static_cast<int>(p)) = rows[g][p];
  }
  return m;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

TEST(Confusion, AccumulateSkipsIgnoredTruth) {
  LabelMask pred(1, 4), truth(1, 4);
  pred.data = {0, 1, 1, 2};
  truth.data = {0, 1, 255, 1};
  ConfusionMatrix m(3);
  m.accumulate(pred, truth);
  EXPECT_EQ(m.at(0, 0), 1u);
  EXPECT_EQ(m.at(1, 1), 1u);
  EXPECT_EQ(m.at(1, 2), 1u);
  EXPECT_EQ(m.total(), 3u);
}

TEST(Confusion, MatchesCountingOracle) {
  std::mt19937_64 gen(21);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<LabelMask> preds, truths;
    ConfusionMatrix m(6);
    for (int i = 0; i < 4; ++i) {
      preds.push_back(oracle::random_mask(gen, 9, 7, 6));
      truths.push_back(oracle::random_mask(gen, 9, 7, 6, 0.15));
      m.accumulate(preds.back(), truths.back());
    }
    const auto expected = oracle::count_confusion(preds, truths, 6);
    for (int g = 0; g < 6; ++g) {
      for (int p = 0; p < 6; ++p) EXPECT_EQ(m.at(g, p), static_cast<std::uint64_t>(expected[g][p]));
    }
  }
}

TEST(Confusion, TotalCountsNonIgnoredPixels) {
  std::mt19937_64 gen(22);
  const LabelMask truth = oracle::random_mask(gen, 20, 20, 4, 0.3);
  ConfusionMatrix m(4);
  m.accumulate(oracle::random_mask(gen, 20, 20, 4), truth);
  const auto valid = std::count_if(truth.data.begin(), truth.data.end(), [](auto v) { return v != 255; });
  EXPECT_EQ(m.total(), static_cast<std::uint64_t>(valid));
}

TEST(Confusion, OrderAndPartitionInvariance) {
  std::mt19937_64 gen(23);
  std::vector<std::pair<LabelMask, LabelMask>> pairs;
  for (int i = 0; i < 12; ++i) {
    pairs.emplace_back(oracle::random_mask(gen, 5, 5, 5), oracle::random_mask(gen, 5, 5, 5, 0.1));
  }
  ConfusionMatrix forward(5), shuffled(5), left(5), right(5);
  for (const auto& [p, t] : pairs) forward.accumulate(p, t);
  auto order = pairs;
  std::shuffle(order.begin(), order.end(), gen);
  for (const auto& [p, t] : order) shuffled.accumulate(p, t);
  for (std::size_t i = 0; i < pairs.size(); ++i) (i < 5 ? left : right).accumulate(pairs[i].first, pairs[i].second);
  left.merge(right);
  EXPECT_EQ(forward, shuffled);
  EXPECT_EQ(forward, left);
}

TEST(Confusion, RejectsBadInput) {
  ConfusionMatrix m(3);
  EXPECT_THROW(m.accumulate(LabelMask(2, 2, 0), LabelMask(2, 3, 0)), std::invalid_argument);
  EXPECT_THROW(m.accumulate(LabelMask(2, 2, 3), LabelMask(2, 2, 0)), std::invalid_argument);
  EXPECT_THROW(m.merge(ConfusionMatrix(4)), std::invalid_argument);
  EXPECT_THROW(ConfusionMatrix(-1), std::invalid_argument);
}

TEST(Miou, SymmetricTwoClassExample) {
  const EvalReport r = miou(from_rows({{3, 1}, {1, 3}}));
  ASSERT_EQ(r.per_class_iou.size(), 2u);
  EXPECT_DOUBLE_EQ(*r.per_class_iou[0], 0.6);
  EXPECT_DOUBLE_EQ(*r.per_class_iou[1], 0.6);
  EXPECT_DOUBLE_EQ(r.miou, 0.6);
}

TEST(Miou, MatchesOracleOnRandomPairs) {
  std::mt19937_64 gen(24);
  for (int trial = 0; trial < 100; ++trial) {
    const LabelMask pred = oracle::random_mask(gen, 8, 8, 7);
    const LabelMask truth = oracle::random_mask(gen, 8, 8, 7, 0.1);
    ConfusionMatrix m(7);
    m.accumulate(pred, truth);
    const auto expected = oracle::iou_from_counts(oracle::count_confusion({pred}, {truth}, 7));
    const EvalReport r = miou(m);
    EXPECT_NEAR(r.miou, expected.miou, 1e-12);
    for (int c = 0; c < 7; ++c) {
      ASSERT_EQ(r.per_class_iou[c].has_value(), expected.iou[c].has_value());
      if (r.per_class_iou[c]) {
        EXPECT_NEAR(*r.per_class_iou[c], *expected.iou[c], 1e-12);
        EXPECT_GE(*r.per_class_iou[c], 0.0);
        EXPECT_LE(*r.per_class_iou[c], 1.0);
      }
    }
  }
}

TEST(Miou, AbsentClassIsExcludedNotZero) {
  const EvalReport r = miou(from_rows({{4, 0, 0}, {0, 0, 0}, {0, 0, 4}}));
  EXPECT_FALSE(r.per_class_iou[1].has_value());
  EXPECT_EQ(r.excluded(), std::vector<int>{1});
  EXPECT_DOUBLE_EQ(r.miou, 1.0);
}

TEST(Miou, NeverPredictedClassCountsAsZero) {
  const EvalReport r = miou(from_rows({{4, 0}, {2, 0}}));
  EXPECT_DOUBLE_EQ(*r.per_class_iou[1], 0.0);
  EXPECT_DOUBLE_EQ(r.miou, (4.0 / 6.0) / 2.0);
}

TEST(Miou, SubsetsAverageDefinedClassesOnly) {
  const ConfusionMatrix m = from_rows({{3, 1, 0, 0}, {1, 3, 0, 0}, {0, 0, 0, 0}, {0, 0, 0, 5}});
  const EvalReport r = miou(m, {{"shared", {0, 1, 2}}, {"private", {3}}, {"nothing", {2}}});
  EXPECT_DOUBLE_EQ(r.class_subset_mious.at("shared"), 0.6);
  EXPECT_DOUBLE_EQ(r.class_subset_mious.at("private"), 1.0);
  EXPECT_EQ(r.class_subset_mious.count("nothing"), 0u);
  EXPECT_THROW(miou(m, {{"bad", {4}}}), std::invalid_argument);
}

TEST(Miou, UndefinedEverywhereThrows) {
  EXPECT_THROW(miou(ConfusionMatrix(3)), Error);
  EXPECT_THROW(miou(ConfusionMatrix(0)), std::invalid_argument);
}

TEST(Scenario, NamesRoundTrip) {
  for (Scenario s : {Scenario::kStandard, Scenario::kOsda, Scenario::kMultiSource}) {
    EXPECT_EQ(scenario_from_string(to_string(s)), s);
  }
  EXPECT_THROW(scenario_from_string("closed-set"), std::invalid_argument);
}

class EvaluateTest : public ::testing::Test {
 protected:
  Model model{EncoderConfig{}, 0, 17};

  PrototypeBank single_class_bank(int class_id) const {
    PrototypeBank bank(model.output_dim());
    std::vector<double> v(model.output_dim(), 0.0);
    v[0] = 1.0;
    bank.insert({class_id, v, 1});
    return bank;
  }

  Dataset two_class_dataset() const {
    std::mt19937_64 gen(25);
    Dataset d;
    for (int i = 0; i < 2; ++i) {
      LabelMask mask(20, 28, 0);
      for (int y = 10; y < 20; ++y) {
        for (int x = 0; x < 28; ++x) mask.at(y, x) = 1;
      }
      mask.at(0, 0) = 255;
      d.push_back({oracle::random_tensor(gen, 20, 28, 3, 0, 1), mask, "img" + std::to_string(i)});
    }
    return d;
  }
};

TEST_F(EvaluateTest, ClassMissingFromBankScoresZero) {
  const Dataset d = two_class_dataset();
  const EvalReport r = evaluate(model, single_class_bank(0), d, 2);
  ASSERT_EQ(r.per_class_iou.size(), 2u);
  // Every pixel is predicted as class 0.
  EXPECT_DOUBLE_EQ(*r.per_class_iou[0], 279.0 / 559.0);
  EXPECT_DOUBLE_EQ(*r.per_class_iou[1], 0.0);
}

TEST_F(EvaluateTest, PredictionKeepsImageSizeWhenPadding) {
  const Dataset d = two_class_dataset();
  const LabelMask pred = segment_image(model, single_class_bank(3), d[0].image);
  EXPECT_EQ(pred.height, 20);
  EXPECT_EQ(pred.width, 28);
  for (auto v : pred.data) EXPECT_EQ(v, 3);
}

TEST_F(EvaluateTest, RejectsEmptyDatasetAndMismatchedBank) {
  EXPECT_THROW(evaluate(model, single_class_bank(0), Dataset{}, 2), std::invalid_argument);
  PrototypeBank narrow(8);
  narrow.insert({0, std::vector<double>(8, 1.0), 1});
  EXPECT_THROW(evaluate(model, narrow, two_class_dataset(), 2), ConfigMismatch);
}

TEST_F(EvaluateTest, ScenarioIsRecorded) {
  const EvalReport r = evaluate(model, single_class_bank(0), two_class_dataset(), 2, Scenario::kOsda);
  EXPECT_EQ(r.scenario, Scenario::kOsda);
}

TEST(Report, RoundTripAndStableBytes) {
  const fs::path dir = fs::temp_directory_path() / "fsda_test_report";
  fs::remove_all(dir);
  EvalReport r = miou(from_rows({{3, 1, 0}, {1, 3, 0}, {0, 0, 0}}), {{"shared", {0, 1}}});
  r.scenario = Scenario::kMultiSource;
  r.class_names = {"road", "car", "sky"};
  emit_report(r, (dir / "a.json").string());
  emit_report(r, (dir / "b.json").string());
  EXPECT_EQ(parse_report((dir / "a.json").string()), r);
  EXPECT_EQ(read_file(dir / "a.json"), read_file(dir / "b.json"));
  const std::string table = read_file(dir / "a.txt");
  EXPECT_NE(table.find("road"), std::string::npos);
  EXPECT_NE(table.find("n/a"), std::string::npos);
  EXPECT_NE(table.find("shared"), std::string::npos);
  EXPECT_EQ(table, format_report_table(r));
}

TEST(Report, EmptySubsetHasNoRow) {
  const EvalReport r = miou(from_rows({{2, 0}, {0, 0}}), {{"ghost", {1}}});
  EXPECT_EQ(format_report_table(r).find("ghost"), std::string::npos);
}

TEST(Report, ParseRejectsForeignFiles) {
  const fs::path path = fs::temp_directory_path() / "fsda_test_report_foreign.json";
  std::ofstream(path) << R"({"format": "something-else", "version": 1})";
  EXPECT_THROW(parse_report(path.string()), IntegrityError);
  std::ofstream(path) << "{ not json";
  EXPECT_THROW(parse_report(path.string()), IntegrityError);
}

TEST(Report, ComparisonTableHasOneRowPerReport) {
  const EvalReport a = miou(from_rows({{3, 1}, {1, 3}}));
  const EvalReport b = miou(from_rows({{4, 0}, {0, 4}}));
  const std::string table = format_comparison_table({{"fsda", a}, {"source-only", b}});
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 3);
  EXPECT_NE(table.find("60.0"), std::string::npos);
  EXPECT_NE(table.find("100.0"), std::string::npos);
  EXPECT_TRUE(format_comparison_table({}).empty());
}

}  // namespace
