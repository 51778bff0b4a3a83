#pragma once

#include <cstddef>
#include <vector>

#include "segcal/core.hpp"

namespace segcal {

enum class EmptyBinPolicy {
  // Empty bins are skipped: the ACE denominator is the non-empty bin count.
  kExclude,
  // Empty bins contribute a zero gap and the ACE denominator is M.
  kCountAsZero,
};

struct MetricOptions {
  EmptyBinPolicy empty_bins = EmptyBinPolicy::kExclude;
  // When false and there are at least two classes, class 0 is left out of the
  // class average (per-class values are still reported).
  bool include_background = true;
};

// Classes that take part in the class average under `options`.
std::vector<std::size_t> averaged_classes(std::size_t num_classes,
                                          const MetricOptions& options);

struct ClassMetric {
  std::vector<double> per_class;
  double mean = 0.0;
};

// Occupancy-weighted mean of |o - e| per class (mL1-ECE).
ClassMetric ml1_ece(const CalibrationReport& report, const MetricOptions& options = {});
// Unweighted mean of |o - e| over bins per class (mL1-ACE).
ClassMetric ml1_ace(const CalibrationReport& report, const MetricOptions& options = {});
// Largest |o - e| per class (mL1-MCE).
ClassMetric ml1_mce(const CalibrationReport& report, const MetricOptions& options = {});

struct CalibrationSummary {
  std::vector<double> per_class_ece;
  std::vector<double> per_class_ace;
  std::vector<double> per_class_mce;
  double mean_ece = 0.0;
  double mean_ace = 0.0;
  double mean_mce = 0.0;
  std::vector<std::size_t> nonempty_bins_per_class;
};

CalibrationSummary summarize(const CalibrationReport& report,
                             const MetricOptions& options = {});

}  // namespace segcal
