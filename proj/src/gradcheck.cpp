#include "segcal/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "segcal/calib_loss.hpp"
#include "segcal/error.hpp"
#include "segcal/metrics.hpp"

namespace segcal {

double relative_error(std::span<const double> analytic, std::span<const double> numeric) {
  if (analytic.size() != numeric.size()) {
    throw StructuralError("relative_error: " + std::to_string(analytic.size()) + " vs " +
                          std::to_string(numeric.size()) + " values");
  }
  double diff = 0.0, scale = 0.0;
  for (std::size_t k = 0; k < analytic.size(); ++k) {
    diff = std::max(diff, std::abs(analytic[k] - numeric[k]));
    scale = std::max({scale, std::abs(analytic[k]), std::abs(numeric[k])});
  }
  return scale == 0.0 ? 0.0 : diff / scale;
}

namespace {

bool off_edges(double p, const BinConfig& bins, double margin) {
  const double scaled = p * static_cast<double>(bins.num_bins);
  const double nearest = std::round(scaled);
  return std::abs(scaled - nearest) / static_cast<double>(bins.num_bins) >= margin;
}

}  // namespace

GradInstance random_grad_instance(std::mt19937_64& rng, std::size_t num_classes,
                                  std::size_t num_voxels, const BinConfig& bins,
                                  double edge_margin) {
  if (num_classes == 0 || num_voxels == 0) {
    throw StructuralError("gradient instances need at least one class and one voxel");
  }
  bins.validate();
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> sharpness(0.5, 4.0);
  const double scale = sharpness(rng);
  const std::size_t channels = std::max<std::size_t>(num_classes, 2);

  ChannelArray values({num_voxels}, num_classes);
  std::vector<std::int32_t> labels(num_voxels);
  std::vector<double> p(channels);
  for (std::size_t i = 0; i < num_voxels; ++i) {
    for (int attempt = 0;; ++attempt) {
      if (attempt == 10000) throw StructuralError("could not place probabilities off bin edges");
      double total = 0.0;
      for (double& v : p) total += (v = std::exp(scale * normal(rng)));
      for (double& v : p) v /= total;
      if (std::all_of(p.begin(), p.end(),
                      [&](double v) { return off_edges(v, bins, edge_margin); })) {
        break;
      }
    }
    // Labels follow the probabilities so gaps stay moderate.
    double u = unit(rng);
    std::size_t label = channels - 1;
    for (std::size_t c = 0; c < channels; ++c) {
      if (u < p[c]) {
        label = c;
        break;
      }
      u -= p[c];
    }
    if (num_classes == 1) {
      values(0, i) = p[1];
      labels[i] = label == 1 ? 1 : 0;
    } else {
      for (std::size_t c = 0; c < num_classes; ++c) values(c, i) = p[c];
      labels[i] = static_cast<std::int32_t>(label);
    }
  }
  return {ProbabilityMap(std::move(values)), LabelMap({num_voxels}, std::move(labels)), bins};
}

bool clear_of_kinks(const GradInstance& instance, double margin, const MetricOptions& options) {
  const CalibrationReport report = build_report(instance.probs, instance.labels, instance.bins);
  for (std::size_t c : averaged_classes(report.num_classes(), options)) {
    double worst = -1.0, second = -1.0;
    for (const BinStats& b : report.class_bins(c)) {
      if (b.empty()) continue;
      const double g = std::abs(b.gap());
      if (g < margin) return false;
      if (g > worst) {
        second = worst;
        worst = g;
      } else if (g > second) {
        second = g;
      }
    }
    if (second >= 0.0 && worst - second < margin) return false;
  }
  return true;
}

namespace {

double loss_at_probs(const LossSpec& spec, const ProbabilityMap& reference,
                     std::span<const double> values, const LabelMap& labels,
                     const BinConfig& bins, const CombinedLossOptions& options) {
  ProbabilityMap probs(reference.spatial_shape(), reference.num_classes(),
                       std::vector<double>(values.begin(), values.end()));
  return combined_loss(spec, probs, labels, bins, options).value;
}

double loss_at_logits(const LossSpec& spec, const ChannelArray& logits, const LabelMap& labels,
                      const BinConfig& bins, const CombinedLossOptions& options) {
  return combined_loss(spec, softmax(logits), labels, bins, options).value;
}

}  // namespace

GradCheckResult check_gradients(const LossSpec& spec, const GradCheckOptions& options) {
  spec.validate();
  if (options.trials <= 0 || !(options.step > 0.0) || options.max_voxels < 2 ||
      options.max_classes < 1) {
    throw ConfigError("gradient check needs trials > 0, step > 0, max_voxels >= 2, max_classes >= 1");
  }
  std::mt19937_64 rng(options.seed);
  std::uniform_int_distribution<std::size_t> class_dist(1, options.max_classes);
  std::uniform_int_distribution<std::size_t> voxel_dist(2, options.max_voxels);
  const std::size_t bin_choices[] = {5, 10, 20};
  std::uniform_int_distribution<int> bin_dist(0, 2);
  const double h = options.step;

  GradCheckResult result;
  double total = 0.0;
  for (int t = 0; t < options.trials; ++t) {
    GradInstance inst = [&] {
      for (;;) {
        const BinConfig bins{bin_choices[bin_dist(rng)]};
        GradInstance candidate = random_grad_instance(rng, class_dist(rng), voxel_dist(rng), bins,
                                                      options.edge_margin);
        if (clear_of_kinks(candidate, options.kink_margin, options.loss_options.calibration)) {
          return candidate;
        }
        ++result.redrawn;
      }
    }();

    double err = 0.0;
    if (!options.through_softmax) {
      const LossOutput out =
          combined_loss(spec, inst.probs, inst.labels, inst.bins, options.loss_options);
      std::vector<double> x(inst.probs.array().values().begin(),
                            inst.probs.array().values().end());
      std::vector<double> numeric(x.size());
      for (std::size_t k = 0; k < x.size(); ++k) {
        const double x0 = x[k];
        x[k] = x0 + h;
        const double up = loss_at_probs(spec, inst.probs, x, inst.labels, inst.bins,
                                        options.loss_options);
        x[k] = x0 - h;
        const double down = loss_at_probs(spec, inst.probs, x, inst.labels, inst.bins,
                                          options.loss_options);
        x[k] = x0;
        numeric[k] = (up - down) / (2.0 * h);
      }
      err = relative_error(out.grad_probs.values(), numeric);
    } else {
      // Logits that reproduce the instance probabilities.
      ChannelArray logits = inst.probs.array();
      for (std::size_t i = 0; i < logits.num_voxels(); ++i) {
        if (logits.num_classes() == 1) {
          const double p = logits(0, i);
          logits(0, i) = std::log(p) - std::log1p(-p);
        } else {
          for (std::size_t c = 0; c < logits.num_classes(); ++c) logits(c, i) = std::log(logits(c, i));
        }
      }
      const SoftmaxGrad sm = softmax_with_grad(logits);
      const LossOutput out =
          combined_loss(spec, sm.probs(), inst.labels, inst.bins, options.loss_options);
      const ChannelArray analytic = sm.backward(out.grad_probs);
      std::vector<double> numeric(logits.values().size());
      for (std::size_t k = 0; k < numeric.size(); ++k) {
        const double z0 = logits.values()[k];
        logits.values()[k] = z0 + h;
        const double up = loss_at_logits(spec, logits, inst.labels, inst.bins, options.loss_options);
        logits.values()[k] = z0 - h;
        const double down =
            loss_at_logits(spec, logits, inst.labels, inst.bins, options.loss_options);
        logits.values()[k] = z0;
        numeric[k] = (up - down) / (2.0 * h);
      }
      err = relative_error(analytic.values(), numeric);
    }
    result.max_relative_error = std::max(result.max_relative_error, err);
    total += err;
    ++result.trials;
  }
  result.mean_relative_error = total / static_cast<double>(result.trials);
  return result;
}

}  // namespace segcal
