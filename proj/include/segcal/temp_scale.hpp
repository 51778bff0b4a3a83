#pragma once

#include <cstdint>
#include <span>

#include "segcal/core.hpp"

namespace segcal {

struct TemperatureFitOptions {
  // Search interval and tolerance, both in log T.
  double log_t_min = -3.0;
  double log_t_max = 3.0;
  double tolerance = 1e-4;
  // Voxels beyond this cap are subsampled with `seed`.
  std::size_t max_voxels = 1'000'000;
  std::uint64_t seed = 0;
};

struct TemperatureFit {
  double temperature = 1.0;
  double final_nll = 0.0;
  double baseline_nll = 0.0;  // NLL at T = 1
  int iterations = 0;
  std::size_t voxels_used = 0;
  std::uint64_t seed = 0;
  // Set when every voxel carries the same label: the NLL then keeps falling as
  // T shrinks and the fitted value only reflects the search bound.
  bool weakly_identified = false;
};

// Mean cross-entropy of softmax(logits / T) against the labels.
double temperature_nll(const ChannelArray& logits, const LabelMap& labels, double temperature);

// Golden-section search for the T minimising the pooled NLL over all cases.
TemperatureFit fit_temperature(std::span<const ChannelArray> logits,
                               std::span<const LabelMap> labels,
                               const TemperatureFitOptions& options = {});

TemperatureFit fit_temperature(const ChannelArray& logits, const LabelMap& labels,
                               const TemperatureFitOptions& options = {});

// softmax(logits / T).
ProbabilityMap apply_temperature(const ChannelArray& logits, double temperature);

}  // namespace segcal
