#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "advdet/errors.hpp"
#include "advdet/losses.hpp"
#include "oracles.hpp"
#include "properties.hpp"

using namespace advdet;

namespace {

Tensor random_logits(std::mt19937_64& rng, std::size_t b, std::size_t k, double sd = 2.0) {
  std::normal_distribution<double> n(0.0, sd);
  Tensor t({b, k});
  for (double& v : t.values()) v = n(rng);
  return t;
}

Labels random_labels(std::mt19937_64& rng, std::size_t b, std::size_t k) {
  Labels y(b);
  for (auto& l : y) l = std::uniform_int_distribution<std::size_t>(0, k - 1)(rng);
  return y;
}

std::vector<double> flat(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

}  // namespace

TEST(FalseOutputSet, MembershipAndSize) {
  std::mt19937_64 rng(1);
  const Tensor logits = random_logits(rng, 5, 4);
  const Labels y{0, 3, 3, 1, 2};
  const FalseOutputSet set = false_output_set(logits, y);
  ASSERT_EQ(set.values.size(), 5u * 3u);
  for (std::size_t k = 0; k < set.values.size(); ++k) {
    const auto [i, c] = set.sources[k];
    EXPECT_NE(c, y[i]);
    EXPECT_EQ(set.values[k], logits[i * 4 + c]);
  }
}

TEST(FalseOutputLoss, Examples) {
  EXPECT_EQ(false_output_loss(Tensor({2, 3}, {9, 1.5, 1.5, 1.5, -4, 1.5}), Labels{0, 1}), 0.0);
  // The false set of one sample with label 0 is [ln 2, 0].
  const double v = false_output_loss(Tensor({1, 3}, {7.0, std::log(2.0), 0.0}), Labels{0});
  EXPECT_NEAR(v, 0.5 * std::log(9.0 / 8.0), 1e-15);
  EXPECT_NEAR(v, 0.0589, 5e-5);
}

TEST(FalseOutputLoss, SymmetricNonNegativeZeroOnlyWhenFlat) {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 300; ++t) {
    const std::size_t b = 1 + t % 6, k = 2 + t % 4;
    const Tensor logits = random_logits(rng, b, k);
    const Labels y = random_labels(rng, b, k);
    Tensor negated = logits;
    for (double& v : negated.values()) v = -v;
    const double a = false_output_loss(logits, y);
    EXPECT_NEAR(a, false_output_loss(negated, y), 1e-14);
    EXPECT_NEAR(a, oracle::false_loss(flat(logits), k, y), 1e-12);
    if (b * (k - 1) > 1) {
      EXPECT_GT(a, 1e-12);
    } else {
      EXPECT_EQ(a, 0.0);
    }
  }
}

TEST(FalseOutputLoss, NeedsTwoClasses) {
  Graph g;
  const NodeId l = g.input("l", {2, 1});
  EXPECT_THROW(false_output_loss(g, l, Labels{0, 0}), ContractError);
  EXPECT_THROW(false_output_loss(Tensor({1, 2}), Labels{2}), ContractError);
}

TEST(ComputeBias, Examples) {
  EXPECT_EQ(compute_bias(1, 9, 9), 0.0);
  EXPECT_NEAR(compute_bias(1, 18, 9), std::log(2.0), 1e-15);
  EXPECT_NEAR(compute_bias(2, 8, 9), std::log(4.0) - std::log(9.0), 1e-15);
  EXPECT_THROW(compute_bias(0, 9, 9), ContractError);
  EXPECT_THROW(compute_bias(1, 0, 9), ContractError);
  EXPECT_THROW(compute_bias(1, 9, 0.5), ContractError);
}

TEST(ClassColumns, CountsAndMask) {
  const Labels y{2, 0, 2, 1, 2};
  const auto cols = class_columns(y, 4, {});
  ASSERT_EQ(cols.size(), 3u);  // class 3 is absent
  const ClassColumn& c2 = cols[2];
  EXPECT_EQ(c2.class_index, 2u);
  EXPECT_EQ(c2.n_true, 3u);
  EXPECT_EQ(c2.n_false, 2u);
  EXPECT_EQ(c2.flat_indices, (std::vector<std::size_t>{2, 6, 10, 14, 18}));
  EXPECT_EQ(c2.bias_vector(0.5), Tensor({5}, {0.5, 0, 0.5, 0, 0.5}));

  // Row reading: whole rows of the class-c samples; the bias then vanishes
  // at n_ref = N_C - 1.
  const auto rows = class_columns(y, 4, {}, ColumnReading::kRowConcat);
  EXPECT_EQ(rows[2].n_true, 3u);
  EXPECT_EQ(rows[2].n_false, 9u);
  EXPECT_EQ(compute_bias(rows[2].n_true, rows[2].n_false, 3.0), 0.0);
}

TEST(TrueOutputLoss, NineFalseEntriesExample) {
  // Class 0: one true logit 2, nine false logits 0, n_ref 9.
  Tensor logits({10, 2});
  Labels y(10, 1);
  y[0] = 0;
  logits[0] = 2.0;
  const ClassColumn col = class_columns(y, 2, {}).front();
  const double expected = -std::log(std::exp(2.0) / (std::exp(2.0) + 9.0));
  EXPECT_NEAR(class_column_loss(logits, col, 9.0), expected, 1e-14);
  EXPECT_NEAR(std::exp(-expected), 0.4508, 1e-4);
}

TEST(TrueOutputLoss, ThreeFalseEntriesWithBiasMatchesNine) {
  Tensor logits({4, 2});
  Labels y{0, 1, 1, 1};
  logits[0] = 2.0;
  const ClassColumn col = class_columns(y, 2, {}).front();
  EXPECT_NEAR(compute_bias(1, 3, 9.0), -std::log(3.0), 1e-15);
  EXPECT_NEAR(class_column_loss(logits, col, 9.0),
              -std::log(std::exp(2.0) / (std::exp(2.0) + 9.0)), 1e-14);
}

TEST(TrueOutputLoss, SingleClassBatchWarnsAndSkipsBias) {
  const Tensor logits({3, 2}, {1, 1, 1, 1, 1, 1});
  LossWarnings warnings;
  EXPECT_EQ(true_output_loss(logits, Labels{0, 0, 0}, 1.0, &warnings), 0.0);
  ASSERT_EQ(warnings.size(), 1u);
  EXPECT_NE(warnings[0].find("class 0"), std::string::npos);
}

TEST(TrueOutputLoss, MatchesOracleAndDividesByClassCount) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 300; ++t) {
    const std::size_t b = 1 + t % 8, k = 2 + t % 5;
    const Tensor logits = random_logits(rng, b, k);
    const Labels y = random_labels(rng, b, k);
    EXPECT_NEAR(true_output_loss(logits, y, 9.0), oracle::true_loss(flat(logits), k, y, 9.0),
                1e-12);
  }
}

TEST(CeLoss, Examples) {
  EXPECT_NEAR(ce_loss(Tensor({1, 2}), Labels{0}), std::log(2.0), 1e-15);
  EXPECT_LT(ce_loss(Tensor({1, 3}, {60, 0, 0}), Labels{0}), 1e-20);
}

TEST(CombinedLoss, Reductions) {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 100; ++t) {
    const std::size_t b = 2 + t % 7, k = 2 + t % 4;
    const Tensor logits = random_logits(rng, b, k);
    const Labels y = random_labels(rng, b, k);
    const double n_ref = static_cast<double>(k - 1);
    const double t_loss = true_output_loss(logits, y, n_ref);
    const double f_loss = false_output_loss(logits, y);

    TrainingLossSpec spec;
    spec.weights = {0.7, 0.0};
    EXPECT_NEAR(combined_training_loss(logits, y, std::vector<bool>(b, false), spec),
                0.7 * t_loss, 1e-14);
    spec.weights = {0.7, 1.3};
    EXPECT_NEAR(combined_training_loss(logits, y, std::vector<bool>(b, true), spec),
                1.3 * f_loss, 1e-14);
    spec.weights = {1.0, 1.0};
    EXPECT_NEAR(combined_training_loss(logits, y, std::vector<bool>(b, false), spec),
                t_loss + f_loss, 1e-13);
    spec.true_kind = TrueLossKind::kCrossEntropy;
    EXPECT_NEAR(combined_training_loss(logits, y, std::vector<bool>(b, false), spec),
                ce_loss(logits, y) + f_loss, 1e-13);
  }
}

TEST(CombinedLoss, AdversarialRowsNeverReachTheTrueTerm) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 100; ++t) {
    const std::size_t b = 3 + t % 6, k = 2 + t % 4;
    const Tensor logits = random_logits(rng, b, k);
    const Labels y = random_labels(rng, b, k);
    std::vector<bool> adv(b, false);
    adv[t % b] = true;
    adv[(t + 1) % b] = true;
    Tensor zeroed = logits;
    for (std::size_t i = 0; i < b; ++i) {
      if (!adv[i]) continue;
      for (std::size_t c = 0; c < k; ++c) zeroed[i * k + c] = 0.0;
    }
    auto true_term = [&](const Tensor& l) {
      Graph g;
      const NodeId in = g.input("logits", l.shape());
      const TrainingLossNodes n = combined_training_loss(g, in, y, adv, TrainingLossSpec{});
      const Execution run = forward(g, {{"logits", l}});
      const TensorMap grads = backward(g, run, *n.true_term);
      return std::make_pair(run.value(*n.true_term).item(), grads.at("logits"));
    };
    const auto [a, ga] = true_term(logits);
    const auto [z, gz] = true_term(zeroed);
    EXPECT_EQ(a, z);
    for (std::size_t i = 0; i < b; ++i) {
      if (!adv[i]) continue;
      for (std::size_t c = 0; c < k; ++c) EXPECT_EQ(ga[i * k + c], 0.0);
    }
  }
}

TEST(CombinedLoss, MaskLengthChecked) {
  EXPECT_THROW(combined_training_loss(Tensor({2, 3}), Labels{0, 1}, {true}, TrainingLossSpec{}),
               ContractError);
}

TEST(LossProperties, GradientsMatchFiniteDifferences) {
  EXPECT_LT(props::training_loss_gradient_error(100, 7), 1e-5);
}

TEST(LossProperties, CeGradientIsSoftmaxMinusOneHot) {
  EXPECT_LT(props::ce_gradient_identity_error(500, 8), 1e-10);
}

TEST(LossProperties, BiasEquivalence) {
  EXPECT_LT(props::bias_equivalence_error(500, 9), 1e-12);
}

TEST(LossProperties, FalseGradientSum) {
  EXPECT_LT(props::false_gradient_sum_error(500, 10), 1e-12);
}

TEST(LossProperties, MultiHotEqualsAveragedOneHot) {
  EXPECT_LT(props::multi_hot_equivalence_error(500, 11), 1e-12);
}
