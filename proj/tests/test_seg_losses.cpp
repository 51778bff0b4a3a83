#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracle.hpp"
#include "segcal/error.hpp"
#include "segcal/gradcheck.hpp"
#include "segcal/seg_losses.hpp"

using namespace segcal;

namespace {

std::vector<double> as_vector(const ChannelArray& a) {
  return std::vector<double>(a.values().begin(), a.values().end());
}

template <typename F>
void check_prob_fd(F loss, std::uint64_t seed, double tol) {
  std::mt19937_64 rng(seed);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t C = 1 + trial % 4;
    const BinConfig cfg{20};
    const GradInstance inst = random_grad_instance(rng, C, 10 + rng() % 60, cfg, 1e-3);
    const LossOutput out = loss(inst.probs, inst.labels);
    const auto numeric = oracle::central_diff(
        [&](const std::vector<double>& x) {
          return loss(ProbabilityMap(inst.probs.spatial_shape(), C, x), inst.labels).value;
        },
        as_vector(inst.probs.array()));
    ASSERT_LT(oracle::max_rel_error(as_vector(out.grad_probs), numeric), tol) << "trial " << trial;
  }
}

}  // namespace

TEST(CeLoss, ClosedForms) {
  EXPECT_EQ(ce_loss(ProbabilityMap({2}, 2, {1, 0, 0, 1}), LabelMap({2}, {0, 1})).value, 0.0);
  EXPECT_NEAR(ce_loss(ProbabilityMap({1}, 2, {0.5, 0.5}), LabelMap({1}, {1})).value,
              std::log(2.0), 1e-15);
  // One channel: the labelled-class probability of a background voxel is 1 - p.
  EXPECT_NEAR(ce_loss(ProbabilityMap({2}, 1, {0.8, 0.8}), LabelMap({2}, {1, 0})).value,
              -(std::log(0.8) + std::log(0.2)) / 2.0, 1e-15);
}

TEST(CeLoss, ClampKeepsZeroProbabilityFinite) {
  const LossOutput out = ce_loss(ProbabilityMap({1}, 2, {1.0, 0.0}), LabelMap({1}, {1}));
  EXPECT_TRUE(std::isfinite(out.value));
  EXPECT_NEAR(out.value, -std::log(1e-12), 1e-9);
  for (double g : out.grad_probs.values()) EXPECT_TRUE(std::isfinite(g));
}

TEST(CeLoss, FiniteDifferences) {
  check_prob_fd([](const ProbabilityMap& p, const LabelMap& l) { return ce_loss(p, l); }, 200, 1e-6);
}

TEST(CeFromLogits, MatchesComposedPathAndFiniteDifferences) {
  std::mt19937_64 rng(201);
  std::normal_distribution<double> n(0.0, 2.0);
  for (std::size_t C : {1u, 2u, 4u}) {
    std::vector<double> z(C * 9);
    for (double& v : z) v = n(rng);
    std::vector<std::int32_t> y(9);
    for (auto& v : y) v = static_cast<std::int32_t>(rng() % std::max<std::size_t>(C, 2));
    const LabelMap l({9}, y);
    const ChannelArray logits({9}, C, z);
    const LogitLossOutput fused = ce_from_logits(logits, l);
    EXPECT_NEAR(fused.value, ce_loss(softmax(logits), l).value, 1e-12);
    const auto numeric = oracle::central_diff(
        [&](const std::vector<double>& x) { return ce_from_logits(ChannelArray({9}, C, x), l).value; }, z);
    EXPECT_LT(oracle::max_rel_error(as_vector(fused.grad_logits), numeric), 1e-6);
  }
}

TEST(SoftDice, ClosedForms) {
  SegLossOptions exact;
  exact.dice_eps = 0.0;
  EXPECT_NEAR(soft_dice_loss(ProbabilityMap({2}, 1, {0.5, 0.5}), LabelMap({2}, {1, 1}), exact).value,
              1.0 / 3.0, 1e-15);
  EXPECT_NEAR(soft_dice_loss(ProbabilityMap({2}, 2, {1, 0, 0, 1}), LabelMap({2}, {0, 1}), exact).value,
              0.0, 1e-15);
  // Default eps keeps the value close to 0 for a perfect match.
  EXPECT_LT(soft_dice_loss(ProbabilityMap({2}, 2, {1, 0, 0, 1}), LabelMap({2}, {0, 1})).value, 1e-5);
}

TEST(SoftDice, BackgroundExclusion) {
  const ProbabilityMap p({3}, 2, {0.7, 0.4, 0.1, 0.3, 0.6, 0.9});
  const LabelMap l({3}, {0, 1, 1});
  SegLossOptions fg;
  fg.include_background = false;
  SegLossOptions one;
  const LossOutput all = soft_dice_loss(p, l, one);
  const LossOutput only_fg = soft_dice_loss(p, l, fg);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(only_fg.grad_probs(0, i), 0.0);
  EXPECT_NE(all.value, only_fg.value);
}

TEST(SoftDice, FiniteDifferences) {
  check_prob_fd([](const ProbabilityMap& p, const LabelMap& l) { return soft_dice_loss(p, l); }, 202,
                1e-6);
}

TEST(SoftDice, RangeOnRandomInputs) {
  std::mt19937_64 rng(203);
  for (int trial = 0; trial < 100; ++trial) {
    const ProbabilityMap p = oracle::random_probs(rng, 1 + trial % 4, 50);
    const LabelMap l = oracle::random_labels(rng, p);
    const double v = soft_dice_loss(p, l).value;
    EXPECT_GE(v, 0.0);
    EXPECT_LT(v, 1.0);
    EXPECT_GE(ce_loss(p, l).value, 0.0);
  }
}

TEST(LossSpec, Parsing) {
  const LossSpec a = LossSpec::parse("dice+ace");
  ASSERT_EQ(a.terms.size(), 2u);
  EXPECT_EQ(a.terms[0].first, LossTerm::kDice);
  EXPECT_EQ(a.terms[1].second, 1.0);
  const LossSpec b = LossSpec::parse("ce:1.0+ace:0.5");
  EXPECT_EQ(b.terms[1].first, LossTerm::kAce);
  EXPECT_EQ(b.terms[1].second, 0.5);
  EXPECT_EQ(LossSpec::parse(b.to_string()).terms, b.terms);
  EXPECT_TRUE(b.contains(LossTerm::kCe));
  EXPECT_FALSE(b.contains(LossTerm::kDice));
  EXPECT_THROW(LossSpec::parse("dice+focal"), ConfigError);
  EXPECT_THROW(LossSpec::parse(""), ConfigError);
  EXPECT_THROW(LossSpec::parse("ace:-1"), ConfigError);
  EXPECT_THROW(LossSpec::parse("ace:x"), ConfigError);
  EXPECT_THROW(LossSpec::parse("ace:inf"), ConfigError);
}

TEST(CombinedLoss, SingleTermAndAdditivity) {
  std::mt19937_64 rng(204);
  const ProbabilityMap p = oracle::random_probs(rng, 3, 200);
  const LabelMap l = oracle::random_labels(rng, p);
  const BinConfig cfg{20};
  const LossOutput dice = soft_dice_loss(p, l);
  const LossOutput ace = ace_loss(p, l, cfg);
  const LossOutput only = combined_loss(LossSpec::parse("dice"), p, l, cfg);
  EXPECT_EQ(only.value, dice.value);
  EXPECT_EQ(as_vector(only.grad_probs), as_vector(dice.grad_probs));
  const LossOutput both = combined_loss(LossSpec::parse("dice+ace"), p, l, cfg);
  EXPECT_NEAR(both.value, dice.value + ace.value, 1e-15);
  for (std::size_t k = 0; k < p.array().values().size(); ++k) {
    EXPECT_NEAR(both.grad_probs.values()[k], dice.grad_probs.values()[k] + ace.grad_probs.values()[k], 1e-15);
  }
}

TEST(CombinedLoss, LinearInWeights) {
  std::mt19937_64 rng(205);
  const ProbabilityMap p = oracle::random_probs(rng, 2, 100);
  const LabelMap l = oracle::random_labels(rng, p);
  const BinConfig cfg{10};
  const LossOutput one = combined_loss(LossSpec::parse("ce:1+ace:0.5"), p, l, cfg);
  const LossOutput two = combined_loss(LossSpec::parse("ce:1+ace:1"), p, l, cfg);
  const LossOutput ace = ace_loss(p, l, cfg);
  EXPECT_NEAR(two.value - one.value, 0.5 * ace.value, 1e-15);
  for (std::size_t k = 0; k < 200; ++k) {
    EXPECT_NEAR(two.grad_probs.values()[k] - one.grad_probs.values()[k],
                0.5 * ace.grad_probs.values()[k], 1e-14);
  }
}

TEST(CombinedLoss, FiniteDifferences) {
  for (const char* spec : {"dice+ace", "ce:1.0+ace:0.5", "dice+ece", "ce+dice+mce:0.3"}) {
    GradCheckOptions o;
    o.trials = 40;
    o.seed = 206;
    EXPECT_LT(check_gradients(LossSpec::parse(spec), o).max_relative_error, 1e-5) << spec;
    o.through_softmax = true;
    EXPECT_LT(check_gradients(LossSpec::parse(spec), o).max_relative_error, 1e-4) << spec;
  }
}

TEST(DiceScore, Conventions) {
  const ProbabilityMap exact({4}, 2, {1, 0, 1, 0, 0, 1, 0, 1});
  const LabelMap l({4}, {0, 1, 0, 1});
  EXPECT_EQ(dice_score(exact, l), (std::vector<double>{1.0, 1.0}));
  // Prediction {0, 1} vs truth {1, 2} for class 1: 2*1 / (2+2).
  const ProbabilityMap p({4}, 2, {0.1, 0.2, 0.9, 0.8, 0.9, 0.8, 0.1, 0.2});
  const LabelMap g({4}, {0, 1, 1, 0});
  EXPECT_DOUBLE_EQ(dice_score(p, g)[1], 0.5);
  // Class 2 absent from both prediction and truth.
  const ProbabilityMap three({2}, 3, {0.9, 0.1, 0.1, 0.9, 0.0, 0.0});
  EXPECT_EQ(dice_score(three, LabelMap({2}, {0, 1}))[2], 1.0);
}

TEST(HardPrediction, TiesAndThreshold) {
  EXPECT_EQ(hard_prediction(ProbabilityMap({2}, 2, {0.5, 0.3, 0.5, 0.7})),
            (std::vector<std::int32_t>{0, 1}));
  EXPECT_EQ(hard_prediction(ProbabilityMap({3}, 1, {0.49, 0.5, 0.51})),
            (std::vector<std::int32_t>{0, 1, 1}));
}
