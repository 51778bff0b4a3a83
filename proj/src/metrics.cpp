#include "segcal/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "segcal/error.hpp"

namespace segcal {

std::vector<std::size_t> averaged_classes(std::size_t num_classes,
                                          const MetricOptions& options) {
  std::vector<std::size_t> classes;
  const std::size_t first = (!options.include_background && num_classes >= 2) ? 1 : 0;
  for (std::size_t c = first; c < num_classes; ++c) classes.push_back(c);
  return classes;
}

namespace {

void require_voxels(const CalibrationReport& report) {
  if (report.total_voxels() == 0) {
    throw StructuralError("calibration metrics need a report with at least one voxel");
  }
}

double class_mean(const std::vector<double>& per_class, const MetricOptions& options) {
  const auto classes = averaged_classes(per_class.size(), options);
  double sum = 0.0;
  for (std::size_t c : classes) sum += per_class[c];
  return sum / static_cast<double>(classes.size());
}

}  // namespace

ClassMetric ml1_ece(const CalibrationReport& report, const MetricOptions& options) {
  require_voxels(report);
  const auto total = static_cast<double>(report.total_voxels());
  ClassMetric out;
  out.per_class.resize(report.num_classes());
  for (std::size_t c = 0; c < report.num_classes(); ++c) {
    double sum = 0.0;
    for (const BinStats& b : report.class_bins(c)) {
      if (b.empty()) continue;
      sum += static_cast<double>(b.count) / total * std::abs(b.gap());
    }
    out.per_class[c] = sum;
  }
  out.mean = class_mean(out.per_class, options);
  return out;
}

ClassMetric ml1_ace(const CalibrationReport& report, const MetricOptions& options) {
  require_voxels(report);
  ClassMetric out;
  out.per_class.resize(report.num_classes());
  for (std::size_t c = 0; c < report.num_classes(); ++c) {
    double sum = 0.0;
    for (const BinStats& b : report.class_bins(c)) {
      if (!b.empty()) sum += std::abs(b.gap());
    }
    const std::size_t denom = options.empty_bins == EmptyBinPolicy::kExclude
                                  ? report.nonempty_bins(c)
                                  : report.num_bins();
    out.per_class[c] = sum / static_cast<double>(denom);
  }
  out.mean = class_mean(out.per_class, options);
  return out;
}

ClassMetric ml1_mce(const CalibrationReport& report, const MetricOptions& options) {
  require_voxels(report);
  ClassMetric out;
  out.per_class.resize(report.num_classes());
  for (std::size_t c = 0; c < report.num_classes(); ++c) {
    double worst = 0.0;
    for (const BinStats& b : report.class_bins(c)) {
      if (!b.empty()) worst = std::max(worst, std::abs(b.gap()));
    }
    out.per_class[c] = worst;
  }
  out.mean = class_mean(out.per_class, options);
  return out;
}

CalibrationSummary summarize(const CalibrationReport& report,
                             const MetricOptions& options) {
  ClassMetric ece = ml1_ece(report, options);
  ClassMetric ace = ml1_ace(report, options);
  ClassMetric mce = ml1_mce(report, options);
  CalibrationSummary s;
  s.per_class_ece = std::move(ece.per_class);
  s.per_class_ace = std::move(ace.per_class);
  s.per_class_mce = std::move(mce.per_class);
  s.mean_ece = ece.mean;
  s.mean_ace = ace.mean;
  s.mean_mce = mce.mean;
  for (std::size_t c = 0; c < report.num_classes(); ++c) {
    s.nonempty_bins_per_class.push_back(report.nonempty_bins(c));
  }
  return s;
}

}  // namespace segcal
