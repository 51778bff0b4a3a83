#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "segcal/core.hpp"
#include "segcal/metrics.hpp"

namespace segcal {

enum class CalibrationTerm { kEce, kAce, kMce };

// State retained between the forward and backward pass of a calibration loss.
// Bin membership is frozen at forward time: the gradient is the one of the
// piecewise-linear loss on the cell of probability space the input lies in.
struct BinCache {
  CalibrationTerm term = CalibrationTerm::kAce;
  BinConfig cfg;
  Shape spatial;
  std::size_t num_classes = 0;
  std::size_t num_voxels = 0;
  // Bin of voxel i in channel c, at c * num_voxels + i.
  std::vector<std::uint16_t> membership;
  // sign(o - e) per (class, bin), at c * num_bins + m; 0 for empty bins.
  std::vector<std::int8_t> gap_sign;
  // dL/dp shared by every member of bin (c, m).
  std::vector<double> bin_gradient;
};

struct LossOutput {
  double value = 0.0;
  ChannelArray grad_probs;
  std::optional<BinCache> cache;
};

struct CalibrationForward {
  double value = 0.0;
  CalibrationReport report;
  BinCache cache;
};

CalibrationForward calibration_forward(CalibrationTerm term, const ProbabilityMap& probs,
                                       const LabelMap& labels, const BinConfig& cfg,
                                       const MetricOptions& options = {});

ChannelArray calibration_backward(const BinCache& cache);

// mL1-ACE as a loss. Gradient per member of bin (c, m):
//   -sign(o - e) / (C' * M'_c * n_m)
// where C' is the number of averaged classes and M'_c the ACE denominator.
LossOutput ace_loss(const ProbabilityMap& probs, const LabelMap& labels,
                    const BinConfig& cfg, const MetricOptions& options = {});

// mL1-ECE as a loss; gradient -sign(o - e) / (C' * N).
LossOutput ece_loss(const ProbabilityMap& probs, const LabelMap& labels,
                    const BinConfig& cfg, const MetricOptions& options = {});

// mL1-MCE as a loss; only members of each class's worst bin (lowest index on
// ties) receive -sign(o - e) / (C' * n).
LossOutput mce_loss(const ProbabilityMap& probs, const LabelMap& labels,
                    const BinConfig& cfg, const MetricOptions& options = {});

// Per-voxel softmax over classes together with its vector-Jacobian product.
// A single-channel input is treated as a binary foreground logit (sigmoid).
class SoftmaxGrad {
 public:
  explicit SoftmaxGrad(const ChannelArray& logits);

  const ProbabilityMap& probs() const noexcept { return probs_; }
  // Maps dL/dp to dL/dlogits: p * (g - <g, p>) per voxel.
  ChannelArray backward(const ChannelArray& grad_probs) const;

 private:
  ProbabilityMap probs_;
};

SoftmaxGrad softmax_with_grad(const ChannelArray& logits);
ProbabilityMap softmax(const ChannelArray& logits);

}  // namespace segcal
