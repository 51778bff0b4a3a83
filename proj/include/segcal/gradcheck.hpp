#pragma once

#include <cstdint>
#include <random>
#include <span>

#include "segcal/core.hpp"
#include "segcal/seg_losses.hpp"

namespace segcal {

struct GradCheckOptions {
  int trials = 100;
  std::uint64_t seed = 0;
  double step = 1e-6;  // central-difference step
  // Every probability keeps at least this distance from a bin edge.
  double edge_margin = 1e-3;
  // Instances where a bin gap (or the gap between the two worst bins, for MCE)
  // is closer than this to a kink are redrawn.
  double kink_margin = 1e-4;
  // Differentiate with respect to logits, through softmax_with_grad.
  bool through_softmax = false;
  std::size_t max_voxels = 200;
  std::size_t max_classes = 4;
  CombinedLossOptions loss_options;
};

struct GradCheckResult {
  int trials = 0;
  int redrawn = 0;
  double max_relative_error = 0.0;
  double mean_relative_error = 0.0;
};

struct GradInstance {
  ProbabilityMap probs;
  LabelMap labels;
  BinConfig bins;
};

// max|a - b| / max(max|a|, max|b|); 0 when both are zero.
double relative_error(std::span<const double> analytic, std::span<const double> numeric);

// Random probabilities at least `edge_margin` away from every bin edge with
// labels drawn from them. `num_classes` = 1 gives a foreground channel.
GradInstance random_grad_instance(std::mt19937_64& rng, std::size_t num_classes,
                                  std::size_t num_voxels, const BinConfig& bins,
                                  double edge_margin);

// True when no calibration kink lies within `margin` of the instance.
bool clear_of_kinks(const GradInstance& instance, double margin,
                    const MetricOptions& options = {});

// Compares combined_loss gradients with central differences over random
// instances.
GradCheckResult check_gradients(const LossSpec& spec, const GradCheckOptions& options = {});

}  // namespace segcal
