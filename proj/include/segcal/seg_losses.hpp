#pragma once

#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "segcal/calib_loss.hpp"
#include "segcal/core.hpp"
#include "segcal/metrics.hpp"

namespace segcal {

struct SegLossOptions {
  // Smoothing added to both numerator and denominator of soft Dice.
  double dice_eps = 1e-5;
  // Lower clamp on the labelled-class probability inside the log.
  double ce_clamp = 1e-12;
  // When false (and C >= 2) class 0 is left out of the soft Dice average.
  bool include_background = true;
};

// Mean negative log-likelihood of the labelled class. With a single channel the
// labelled-class probability is p for foreground voxels and 1 - p otherwise.
LossOutput ce_loss(const ProbabilityMap& probs, const LabelMap& labels,
                   const SegLossOptions& options = {});

struct LogitLossOutput {
  double value = 0.0;
  ChannelArray grad_logits;
};

// Cross-entropy with the softmax folded in; gradient (p - onehot) / N.
LogitLossOutput ce_from_logits(const ChannelArray& logits, const LabelMap& labels);

// 1 - (2 sum(p y) + eps) / (sum(p) + sum(y) + eps) per class, averaged.
LossOutput soft_dice_loss(const ProbabilityMap& probs, const LabelMap& labels,
                          const SegLossOptions& options = {});

enum class LossTerm { kCe, kDice, kAce, kEce, kMce };

const char* loss_term_name(LossTerm term);
LossTerm parse_loss_term(std::string_view name);

// Weighted sum of loss terms, written as e.g. "dice+ace" or "ce:1.0+ace:0.5".
struct LossSpec {
  std::vector<std::pair<LossTerm, double>> terms;

  static LossSpec parse(std::string_view text);
  std::string to_string() const;
  void validate() const;
  bool contains(LossTerm term) const;
};

struct CombinedLossOptions {
  SegLossOptions seg;
  MetricOptions calibration;
};

LossOutput combined_loss(const LossSpec& spec, const ProbabilityMap& probs,
                         const LabelMap& labels, const BinConfig& cfg,
                         const CombinedLossOptions& options = {});

// Hard Dice overlap per class after a per-voxel argmax (a 0.5 threshold for a
// single channel). A class absent from both prediction and truth scores 1.
std::vector<double> dice_score(const ProbabilityMap& probs, const LabelMap& labels);

// Per-voxel predicted class (argmax, lowest index on ties).
std::vector<std::int32_t> hard_prediction(const ProbabilityMap& probs);

}  // namespace segcal
