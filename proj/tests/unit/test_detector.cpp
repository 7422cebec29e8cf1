#include <algorithm>
#include <numeric>
#include <random>
#include <sstream>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "advdet/detector.hpp"
#include "advdet/errors.hpp"
#include "oracles.hpp"
#include "properties.hpp"

using namespace advdet;

namespace {

std::vector<double> one_to(std::size_t n) {
  std::vector<double> v(n);
  std::iota(v.begin(), v.end(), 1.0);
  return v;
}

}  // namespace

TEST(Percentile, Examples) {
  std::vector<double> v = one_to(100);
  std::shuffle(v.begin(), v.end(), std::mt19937_64(1));
  EXPECT_EQ(percentile_nearest_rank(v, 99), 99.0);
  EXPECT_EQ(percentile_nearest_rank(v, 99), oracle::percentile_sorted(one_to(100), 99));
  EXPECT_EQ(percentile_nearest_rank(v, 100), 100.0);
  EXPECT_EQ(percentile_nearest_rank(v, 0.5), 1.0);
  for (double p : {0.1, 50.0, 99.0, 100.0}) {
    EXPECT_EQ(percentile_nearest_rank(std::vector<double>{5.0}, p), 5.0);
  }
}

TEST(Percentile, Errors) {
  EXPECT_THROW(percentile_nearest_rank(std::vector<double>{}, 99), ContractError);
  EXPECT_THROW(percentile_nearest_rank(std::vector<double>{1.0}, 0.0), ContractError);
  EXPECT_THROW(percentile_nearest_rank(std::vector<double>{1.0}, 100.5), ContractError);
}

TEST(Calibrate, FromFalseOutputs) {
  const DetectorThresholds t = calibrate_from_false_outputs(one_to(100));
  EXPECT_EQ(t.t_max, 99.0);
  EXPECT_EQ(t.t_min, 1.0);
  EXPECT_EQ(t.calibration_size, 100u);
  EXPECT_EQ(t.percentile, 99.0);

  const DetectorThresholds flat = calibrate_from_false_outputs(std::vector<double>(7, -0.25));
  EXPECT_EQ(flat.t_max, -0.25);
  EXPECT_EQ(flat.t_min, -0.25);
}

TEST(Calibrate, UsesOnlyFalseOutputs) {
  // The true outputs are extreme; only the false ones (1..6) may matter.
  const Tensor logits({3, 3}, {1000, 1, 2, 3, -1000, 4, 5, 6, 1000});
  const DetectorThresholds t = calibrate(logits, Labels{0, 1, 2});
  EXPECT_EQ(t.t_max, 6.0);
  EXPECT_EQ(t.t_min, 1.0);
  EXPECT_EQ(t.calibration_size, 6u);
  EXPECT_EQ(calibrate(logits, Labels{0, 1, 2}), t);
  EXPECT_THROW(calibrate(logits, Labels{0, 1}), ContractError);
}

TEST(Calibrate, ModelShapeMismatch) {
  ModelConfig c;
  c.input_shape = {4};
  c.num_classes = 3;
  const Classifier m = build_classifier(c);
  Dataset d = synth_dataset(1, 10, 2, 4, 2.0);
  EXPECT_THROW(calibrate(m, d), ShapeError);
  d = synth_dataset(1, 10, 3, 5, 2.0);
  EXPECT_ANY_THROW(calibrate(m, d));
}

TEST(Detect, Examples) {
  const DetectorThresholds t{1.0, -1.0, 0, 99.0};
  EXPECT_FALSE(detect(std::vector<double>{5.0, 0.1, 0.2}, t));
  EXPECT_TRUE(detect(std::vector<double>{0.5, 0.3, 0.2}, t));
  EXPECT_TRUE(detect(std::vector<double>{5.0, 0.0, -3.0}, t));
  EXPECT_FALSE(detect_max_only(std::vector<double>{5.0, 0.0, -3.0}, 1.0));
  EXPECT_TRUE(detect_max_only(std::vector<double>{0.5, 0.3}, 1.0));
}

TEST(Detect, StrictComparisons) {
  const DetectorThresholds t{1.0, -1.0, 0, 99.0};
  EXPECT_FALSE(detect(std::vector<double>{1.0, -1.0}, t));
  EXPECT_FALSE(detect_max_only(std::vector<double>{1.0}, 1.0));
}

TEST(Detect, MaxOnlyImpliesBothAndMonotonicity) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(0.0, 2.0);
  for (int trial = 0; trial < 2000; ++trial) {
    std::vector<double> row(4);
    for (double& v : row) v = n(rng);
    const DetectorThresholds t{n(rng), n(rng) - 2.0, 0, 99.0};
    const bool both = detect(row, t);
    if (detect_max_only(row, t.t_max)) EXPECT_TRUE(both);
    DetectorThresholds higher = t;
    higher.t_max += std::abs(n(rng));
    if (both) EXPECT_TRUE(detect(row, higher));
    DetectorThresholds raised_min = t;
    raised_min.t_min += std::abs(n(rng));
    if (both) EXPECT_TRUE(detect(row, raised_min));
    DetectorThresholds below = t;
    below.t_min = *std::min_element(row.begin(), row.end());
    EXPECT_EQ(detect(row, below), detect_max_only(row, t.t_max));
  }
}

TEST(Auroc, Examples) {
  EXPECT_EQ(auroc(std::vector<double>{0.9, 0.8}, std::vector<double>{0.7, 0.85}), 0.75);
  EXPECT_EQ(auroc(std::vector<double>{3, 4}, std::vector<double>{1, 2}), 1.0);
  EXPECT_EQ(auroc(std::vector<double>{1, 2, 2}, std::vector<double>{2, 1, 2}), 0.5);
  EXPECT_THROW(auroc(std::vector<double>{}, std::vector<double>{1}), ContractError);
}

TEST(Auroc, MatchesPairwiseOnLargeSetsWithTies) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> coarse(0, 40);
  std::vector<double> clean(1000), adv(1000);
  for (double& v : clean) v = coarse(rng) * 0.25;
  for (double& v : adv) v = coarse(rng) * 0.25 - 1.0;
  EXPECT_EQ(auroc(clean, adv), oracle::auroc_pairwise(clean, adv));
}

TEST(DetectorProperties, OracleSweep) {
  const props::DetectorOracleResult r = props::detector_oracles(300, 200, 4);
  EXPECT_TRUE(r.ok()) << r.first_failure;
}

TEST(Evaluate, CountsAndRates) {
  const DetectorThresholds t{1.0, -1.0, 0, 99.0};
  // Clean: none flagged. Adversarial: 3 of 4 flagged, 2 of 4 change the
  // prediction away from label 0.
  const Tensor clean({2, 3}, {5, 0, 0, 0, 4, 0});
  const Tensor adv({4, 3}, {0.5, 0.2, 0.1,   // flagged, still class 0
                            0.1, 0.9, 0.0,   // flagged, success
                            4.0, 0.0, -2.0,  // flagged by t_min, still class 0
                            0.0, 3.0, 0.0}); // missed, success
  const Labels y(4, 0);
  const DetectionReport all = evaluate(clean, adv, y, t, TprMode::kAll);
  EXPECT_EQ(all.with_min_threshold.adv_total, 4u);
  EXPECT_EQ(all.with_min_threshold.adv_flagged, 3u);
  EXPECT_EQ(all.with_min_threshold.tpr, 0.75);
  EXPECT_EQ(all.with_min_threshold.fpr, 0.0);
  EXPECT_EQ(all.with_min_threshold.tpr_successful, 0.5);
  EXPECT_EQ(all.max_only.tpr, 0.5);
  EXPECT_EQ(all.adv_successful, 2u);
  EXPECT_EQ(all.adv_success, (std::vector<bool>{false, true, false, true}));
  // Clean max {5, 4} against adversarial max {0.5, 0.9, 4, 3}: 7 wins, 1 tie.
  EXPECT_EQ(all.auroc, 7.5 / 8.0);

  const DetectionReport succ = evaluate(clean, adv, y, t, TprMode::kSuccessful);
  EXPECT_EQ(succ.with_min_threshold.adv_total, 2u);
  EXPECT_EQ(succ.with_min_threshold.tpr, 0.5);
  EXPECT_EQ(succ.auroc, 1.0);

  EXPECT_THROW(evaluate(Tensor({0, 3}), adv, y, t), ContractError);
  EXPECT_THROW(evaluate(clean, adv, Labels{0}, t), ShapeError);
}

TEST(Evaluate, JsonAndCsv) {
  const DetectorThresholds t{1.0, -1.0, 6, 99.0};
  const DetectionReport r =
      evaluate(Tensor({1, 2}, {3, 0}), Tensor({2, 2}, {0, 0.5, 2, -3}), Labels{0, 0}, t);
  const nlohmann::json j = to_json(r);
  EXPECT_EQ(j.at("thresholds").at("t_max").get<double>(), 1.0);
  EXPECT_EQ(j.at("with_min_threshold").at("tpr").get<double>(), 1.0);
  EXPECT_EQ(j.at("max_only").at("tpr").get<double>(), 0.5);
  EXPECT_EQ(j.at("tpr_mode").get<std::string>(), "all");

  std::ostringstream os;
  write_sample_csv(os, r.adv_max, r.adv_min, r.with_min_threshold.adv_flags);
  EXPECT_EQ(os.str(), "sample_id,max_logit,min_logit,flagged\n0,0.5,0,1\n1,2,-3,1\n");
}

TEST(TprMode, Names) {
  EXPECT_EQ(parse_tpr_mode(to_string(TprMode::kAll)), TprMode::kAll);
  EXPECT_EQ(parse_tpr_mode(to_string(TprMode::kSuccessful)), TprMode::kSuccessful);
  EXPECT_THROW(parse_tpr_mode("some"), ConfigError);
}
