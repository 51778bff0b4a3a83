#include "segcal/temp_scale.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "segcal/calib_loss.hpp"
#include "segcal/error.hpp"

namespace segcal {

namespace {

void check_temperature(double t) {
  if (!std::isfinite(t) || t <= 0.0) {
    throw InputDomainError("temperature must be positive and finite, got " + std::to_string(t));
  }
}

// Pooled voxel sample: logits row-major per voxel plus its label.
struct VoxelSample {
  std::size_t classes = 0;
  std::vector<double> logits;
  std::vector<std::int32_t> labels;

  std::size_t size() const { return labels.size(); }
};

double sample_nll(const VoxelSample& s, double temperature) {
  const double inv_t = 1.0 / temperature;
  const std::size_t c_count = s.classes;
  double total = 0.0;
  for (std::size_t v = 0; v < s.size(); ++v) {
    const double* z = s.logits.data() + v * c_count;
    if (c_count == 1) {
      const double u = (s.labels[v] == 1 ? z[0] : -z[0]) * inv_t;
      total += u >= 0.0 ? std::log1p(std::exp(-u)) : -u + std::log1p(std::exp(u));
      continue;
    }
    double peak = z[0] * inv_t;
    for (std::size_t c = 1; c < c_count; ++c) peak = std::max(peak, z[c] * inv_t);
    double norm = 0.0;
    for (std::size_t c = 0; c < c_count; ++c) norm += std::exp(z[c] * inv_t - peak);
    total += peak + std::log(norm) - z[s.labels[v]] * inv_t;
  }
  return total / static_cast<double>(s.size());
}

VoxelSample pool(std::span<const ChannelArray> logits, std::span<const LabelMap> labels,
                 const TemperatureFitOptions& options) {
  if (logits.size() != labels.size()) {
    throw StructuralError("temperature fit got " + std::to_string(logits.size()) +
                          " logit maps but " + std::to_string(labels.size()) + " label maps");
  }
  if (logits.empty()) throw StructuralError("temperature fit needs at least one case");

  const std::size_t classes = logits.front().num_classes();
  std::size_t total = 0;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    if (logits[k].num_classes() != classes) {
      throw StructuralError("temperature fit cases disagree on the number of classes");
    }
    labels[k].check_compatible(logits[k].spatial_shape(), classes);
    for (double z : logits[k].values()) {
      if (!std::isfinite(z)) throw InputDomainError("non-finite logit in temperature fit");
    }
    total += logits[k].num_voxels();
  }
  if (total == 0) throw StructuralError("temperature fit needs at least one voxel");

  // Global voxel indices to keep, ascending.
  std::vector<std::size_t> keep;
  if (total > options.max_voxels) {
    std::vector<std::size_t> all(total);
    std::iota(all.begin(), all.end(), std::size_t{0});
    keep.reserve(options.max_voxels);
    std::mt19937_64 rng(options.seed);
    std::sample(all.begin(), all.end(), std::back_inserter(keep), options.max_voxels, rng);
  }

  VoxelSample s;
  s.classes = classes;
  const std::size_t kept = keep.empty() ? total : keep.size();
  s.logits.reserve(kept * classes);
  s.labels.reserve(kept);
  std::size_t offset = 0;
  auto next = keep.begin();
  for (std::size_t k = 0; k < logits.size(); ++k) {
    const std::size_t n = logits[k].num_voxels();
    for (std::size_t i = 0; i < n; ++i) {
      if (!keep.empty()) {
        if (next == keep.end() || *next != offset + i) continue;
        ++next;
      }
      for (std::size_t c = 0; c < classes; ++c) s.logits.push_back(logits[k](c, i));
      s.labels.push_back(labels[k][i]);
    }
    offset += n;
  }
  return s;
}

}  // namespace

double temperature_nll(const ChannelArray& logits, const LabelMap& labels, double temperature) {
  check_temperature(temperature);
  TemperatureFitOptions all;
  all.max_voxels = logits.num_voxels();
  return sample_nll(pool({&logits, 1}, {&labels, 1}, all), temperature);
}

TemperatureFit fit_temperature(std::span<const ChannelArray> logits,
                               std::span<const LabelMap> labels,
                               const TemperatureFitOptions& options) {
  if (!(options.log_t_min < options.log_t_max) || !(options.tolerance > 0.0)) {
    throw ConfigError("temperature search needs log_t_min < log_t_max and a positive tolerance");
  }
  const VoxelSample sample = pool(logits, labels, options);

  TemperatureFit fit;
  fit.voxels_used = sample.size();
  fit.seed = options.seed;
  fit.weakly_identified =
      std::all_of(sample.labels.begin(), sample.labels.end(),
                  [&](std::int32_t y) { return y == sample.labels.front(); });

  auto nll_at = [&](double log_t) { return sample_nll(sample, std::exp(log_t)); };

  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = options.log_t_min;
  double b = options.log_t_max;
  double x1 = b - inv_phi * (b - a);
  double x2 = a + inv_phi * (b - a);
  double f1 = nll_at(x1);
  double f2 = nll_at(x2);
  while (b - a > options.tolerance) {
    if (f1 <= f2) {
      b = x2;
      x2 = x1;
      f2 = f1;
      x1 = b - inv_phi * (b - a);
      f1 = nll_at(x1);
    } else {
      a = x1;
      x1 = x2;
      f1 = f2;
      x2 = a + inv_phi * (b - a);
      f2 = nll_at(x2);
    }
    ++fit.iterations;
  }

  const double log_t = 0.5 * (a + b);
  fit.temperature = std::exp(log_t);
  fit.final_nll = nll_at(log_t);
  fit.baseline_nll = sample_nll(sample, 1.0);
  if (fit.baseline_nll < fit.final_nll) {
    fit.temperature = 1.0;
    fit.final_nll = fit.baseline_nll;
  }
  return fit;
}

TemperatureFit fit_temperature(const ChannelArray& logits, const LabelMap& labels,
                               const TemperatureFitOptions& options) {
  return fit_temperature(std::span<const ChannelArray>(&logits, 1),
                         std::span<const LabelMap>(&labels, 1), options);
}

ProbabilityMap apply_temperature(const ChannelArray& logits, double temperature) {
  check_temperature(temperature);
  ChannelArray scaled = logits;
  for (double& z : scaled.values()) z /= temperature;
  return softmax(scaled);
}

}  // namespace segcal
