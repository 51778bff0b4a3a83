#include "segcal/calib_loss.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "segcal/error.hpp"

namespace segcal {

namespace {

std::int8_t sign_of(double g) { return g > 0.0 ? 1 : (g < 0.0 ? -1 : 0); }

}  // namespace

CalibrationForward calibration_forward(CalibrationTerm term, const ProbabilityMap& probs,
                                       const LabelMap& labels, const BinConfig& cfg,
                                       const MetricOptions& options) {
  CalibrationForward fwd;
  fwd.report = build_report(probs, labels, cfg);
  const CalibrationReport& report = fwd.report;

  switch (term) {
    case CalibrationTerm::kEce: fwd.value = ml1_ece(report, options).mean; break;
    case CalibrationTerm::kAce: fwd.value = ml1_ace(report, options).mean; break;
    case CalibrationTerm::kMce: fwd.value = ml1_mce(report, options).mean; break;
  }

  const std::size_t classes = probs.num_classes();
  const std::size_t voxels = probs.num_voxels();
  const std::size_t bins = cfg.num_bins;

  BinCache& cache = fwd.cache;
  cache.term = term;
  cache.cfg = cfg;
  cache.spatial = probs.spatial_shape();
  cache.num_classes = classes;
  cache.num_voxels = voxels;
  cache.membership.resize(classes * voxels);
  for (std::size_t c = 0; c < classes; ++c) {
    const auto channel = probs.channel(c);
    for (std::size_t i = 0; i < voxels; ++i) {
      cache.membership[c * voxels + i] = static_cast<std::uint16_t>(assign_bin(channel[i], cfg));
    }
  }

  cache.gap_sign.assign(classes * bins, 0);
  cache.bin_gradient.assign(classes * bins, 0.0);
  const auto averaged = averaged_classes(classes, options);
  const auto class_weight = 1.0 / static_cast<double>(averaged.size());

  for (std::size_t c : averaged) {
    for (std::size_t m = 0; m < bins; ++m) {
      cache.gap_sign[c * bins + m] = sign_of(report.bin(c, m).gap());
    }
    switch (term) {
      case CalibrationTerm::kEce: {
        // (n/N) |sum(y - p) / n| = |sum(y - p)| / N
        const double scale = class_weight / static_cast<double>(report.total_voxels());
        for (std::size_t m = 0; m < bins; ++m) {
          cache.bin_gradient[c * bins + m] = -cache.gap_sign[c * bins + m] * scale;
        }
        break;
      }
      case CalibrationTerm::kAce: {
        const std::size_t denom = options.empty_bins == EmptyBinPolicy::kExclude
                                      ? report.nonempty_bins(c)
                                      : bins;
        for (std::size_t m = 0; m < bins; ++m) {
          const BinStats& b = report.bin(c, m);
          if (b.empty()) continue;
          cache.bin_gradient[c * bins + m] =
              -cache.gap_sign[c * bins + m] * class_weight /
              (static_cast<double>(denom) * static_cast<double>(b.count));
        }
        break;
      }
      case CalibrationTerm::kMce: {
        std::size_t worst = bins;
        double worst_gap = -1.0;
        for (std::size_t m = 0; m < bins; ++m) {
          const BinStats& b = report.bin(c, m);
          if (b.empty()) continue;
          if (std::abs(b.gap()) > worst_gap) {
            worst_gap = std::abs(b.gap());
            worst = m;
          }
        }
        if (worst < bins) {
          cache.bin_gradient[c * bins + worst] =
              -cache.gap_sign[c * bins + worst] * class_weight /
              static_cast<double>(report.bin(c, worst).count);
        }
        break;
      }
    }
  }
  return fwd;
}

ChannelArray calibration_backward(const BinCache& cache) {
  ChannelArray grad(cache.spatial, cache.num_classes);
  const std::size_t bins = cache.cfg.num_bins;
  for (std::size_t c = 0; c < cache.num_classes; ++c) {
    auto out = grad.channel(c);
    const double* coeff = cache.bin_gradient.data() + c * bins;
    const std::uint16_t* member = cache.membership.data() + c * cache.num_voxels;
    for (std::size_t i = 0; i < cache.num_voxels; ++i) out[i] = coeff[member[i]];
  }
  return grad;
}

namespace {

LossOutput run_term(CalibrationTerm term, const ProbabilityMap& probs,
                    const LabelMap& labels, const BinConfig& cfg,
                    const MetricOptions& options) {
  CalibrationForward fwd = calibration_forward(term, probs, labels, cfg, options);
  LossOutput out;
  out.value = fwd.value;
  out.grad_probs = calibration_backward(fwd.cache);
  out.cache = std::move(fwd.cache);
  return out;
}

}  // namespace

LossOutput ace_loss(const ProbabilityMap& probs, const LabelMap& labels,
                    const BinConfig& cfg, const MetricOptions& options) {
  return run_term(CalibrationTerm::kAce, probs, labels, cfg, options);
}

LossOutput ece_loss(const ProbabilityMap& probs, const LabelMap& labels,
                    const BinConfig& cfg, const MetricOptions& options) {
  return run_term(CalibrationTerm::kEce, probs, labels, cfg, options);
}

LossOutput mce_loss(const ProbabilityMap& probs, const LabelMap& labels,
                    const BinConfig& cfg, const MetricOptions& options) {
  return run_term(CalibrationTerm::kMce, probs, labels, cfg, options);
}

// ---------------------------------------------------------------------------
// Softmax

namespace {

ChannelArray softmax_values(const ChannelArray& logits) {
  const std::size_t classes = logits.num_classes();
  const std::size_t voxels = logits.num_voxels();
  if (classes == 0) throw StructuralError("softmax needs at least one class");
  for (std::size_t k = 0; k < logits.values().size(); ++k) {
    if (!std::isfinite(logits.values()[k])) {
      throw InputDomainError("non-finite logit at flat index " + std::to_string(k));
    }
  }

  ChannelArray probs(logits.spatial_shape(), classes);
  if (classes == 1) {
    for (std::size_t i = 0; i < voxels; ++i) {
      const double z = logits(0, i);
      probs(0, i) = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z))
                             : std::exp(z) / (1.0 + std::exp(z));
    }
    return probs;
  }
  for (std::size_t i = 0; i < voxels; ++i) {
    double peak = logits(0, i);
    for (std::size_t c = 1; c < classes; ++c) peak = std::max(peak, logits(c, i));
    double total = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
      const double e = std::exp(logits(c, i) - peak);
      probs(c, i) = e;
      total += e;
    }
    for (std::size_t c = 0; c < classes; ++c) probs(c, i) /= total;
  }
  return probs;
}

}  // namespace

SoftmaxGrad::SoftmaxGrad(const ChannelArray& logits)
    : probs_(softmax_values(logits)) {}

ChannelArray SoftmaxGrad::backward(const ChannelArray& grad_probs) const {
  const ChannelArray& p = probs_.array();
  if (!grad_probs.same_layout(p)) {
    throw StructuralError("softmax backward: gradient layout does not match probabilities");
  }
  ChannelArray grad(p.spatial_shape(), p.num_classes());
  for (std::size_t i = 0; i < p.num_voxels(); ++i) {
    double inner = 0.0;
    for (std::size_t c = 0; c < p.num_classes(); ++c) inner += grad_probs(c, i) * p(c, i);
    for (std::size_t c = 0; c < p.num_classes(); ++c) {
      grad(c, i) = p(c, i) * (grad_probs(c, i) - inner);
    }
  }
  return grad;
}

SoftmaxGrad softmax_with_grad(const ChannelArray& logits) { return SoftmaxGrad(logits); }

ProbabilityMap softmax(const ChannelArray& logits) {
  return ProbabilityMap(softmax_values(logits));
}

}  // namespace segcal
