#include "segcal/core.hpp"

#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <thread>

#include "segcal/error.hpp"

namespace segcal {

std::size_t shape_volume(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

namespace {

std::string shape_string(const Shape& shape) {
  std::string out = "(";
  for (std::size_t d = 0; d < shape.size(); ++d) {
    if (d) out += ",";
    out += std::to_string(shape[d]);
  }
  return out + ")";
}

}  // namespace

// ---------------------------------------------------------------------------
// ChannelArray

ChannelArray::ChannelArray(Shape spatial, std::size_t num_classes, double fill)
    : spatial_(std::move(spatial)),
      classes_(num_classes),
      voxels_(shape_volume(spatial_)),
      values_(classes_ * voxels_, fill) {}

ChannelArray::ChannelArray(Shape spatial, std::size_t num_classes,
                           std::vector<double> values)
    : spatial_(std::move(spatial)),
      classes_(num_classes),
      voxels_(shape_volume(spatial_)),
      values_(std::move(values)) {
  if (values_.size() != classes_ * voxels_) {
    throw StructuralError("channel array of shape " + shape_string(spatial_) +
                          " x " + std::to_string(classes_) + " classes needs " +
                          std::to_string(classes_ * voxels_) + " values, got " +
                          std::to_string(values_.size()));
  }
}

bool ChannelArray::same_layout(const ChannelArray& other) const noexcept {
  return classes_ == other.classes_ && spatial_ == other.spatial_;
}

// ---------------------------------------------------------------------------
// ProbabilityMap

ProbabilityMap::ProbabilityMap(ChannelArray values) : values_(std::move(values)) {
  const std::size_t classes = values_.num_classes();
  const std::size_t voxels = values_.num_voxels();
  if (classes == 0) throw StructuralError("probability map needs at least one class");

  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t i = 0; i < voxels; ++i) {
      const double p = values_(c, i);
      if (!std::isfinite(p) || p < 0.0 || p > 1.0) {
        throw InputDomainError("probability " + std::to_string(p) + " at class " +
                               std::to_string(c) + ", voxel " + std::to_string(i) +
                               " is outside [0,1]");
      }
    }
  }
  if (classes < 2) return;
  for (std::size_t i = 0; i < voxels; ++i) {
    double sum = 0.0;
    for (std::size_t c = 0; c < classes; ++c) sum += values_(c, i);
    if (std::abs(sum - 1.0) > kSumTolerance) {
      throw InputDomainError("class probabilities at voxel " + std::to_string(i) +
                             " sum to " + std::to_string(sum));
    }
  }
}

ProbabilityMap::ProbabilityMap(Shape spatial, std::size_t num_classes,
                               std::vector<double> values)
    : ProbabilityMap(ChannelArray(std::move(spatial), num_classes, std::move(values))) {}

// ---------------------------------------------------------------------------
// LabelMap

LabelMap::LabelMap(Shape spatial, std::vector<std::int32_t> labels)
    : spatial_(std::move(spatial)), labels_(std::move(labels)) {
  if (labels_.size() != shape_volume(spatial_)) {
    throw StructuralError("label map of shape " + shape_string(spatial_) + " needs " +
                          std::to_string(shape_volume(spatial_)) + " values, got " +
                          std::to_string(labels_.size()));
  }
}

void LabelMap::check_compatible(const Shape& spatial, std::size_t num_classes) const {
  if (spatial != spatial_) {
    throw StructuralError("label shape " + shape_string(spatial_) +
                          " does not match probability shape " + shape_string(spatial));
  }
  // A single channel is a foreground probability; its labels are 0/1.
  const std::int32_t limit =
      num_classes == 1 ? 2 : static_cast<std::int32_t>(num_classes);
  for (std::size_t i = 0; i < labels_.size(); ++i) {
    if (labels_[i] < 0 || labels_[i] >= limit) {
      throw InputDomainError("label " + std::to_string(labels_[i]) + " at voxel " +
                             std::to_string(i) + " is not a valid class index for " +
                             std::to_string(num_classes) + " classes");
    }
  }
}

// ---------------------------------------------------------------------------
// Binning

void BinConfig::validate() const {
  if (num_bins < 2) {
    throw ConfigError("number of bins must be at least 2, got " +
                      std::to_string(num_bins));
  }
  if (num_bins > 65535) {
    throw ConfigError("number of bins must be at most 65535, got " +
                      std::to_string(num_bins));
  }
}

std::size_t assign_bin(double p, const BinConfig& cfg) {
  if (!std::isfinite(p) || p < 0.0 || p > 1.0) {
    throw InputDomainError("probability " + std::to_string(p) + " is outside [0,1]");
  }
  const std::size_t last = cfg.num_bins - 1;
  auto m = static_cast<std::size_t>(std::floor(p * static_cast<double>(cfg.num_bins)));
  if (m > last) return last;
  // The product can round across an edge; settle against the edges themselves.
  if (m > 0 && p < cfg.lower_edge(m)) --m;
  if (m < last && p >= cfg.upper_edge(m)) ++m;
  return m;
}

// ---------------------------------------------------------------------------
// ExactSum

namespace {
constexpr double kFixedScale = 4611686018427387904.0;  // 2^62
}

void ExactSum::add(double p) noexcept {
  const auto v = static_cast<std::uint64_t>(p * kFixedScale);
  lo_ += v;
  if (lo_ < v) ++hi_;
}

ExactSum& ExactSum::operator+=(const ExactSum& other) noexcept {
  lo_ += other.lo_;
  if (lo_ < other.lo_) ++hi_;
  hi_ += other.hi_;
  return *this;
}

double ExactSum::value() const noexcept {
  return static_cast<double>(hi_) * 4.0 + static_cast<double>(lo_) / kFixedScale;
}

// ---------------------------------------------------------------------------
// BinStats

double BinStats::observed() const noexcept {
  return empty() ? 0.0 : static_cast<double>(sum_label) / static_cast<double>(count);
}

double BinStats::expected() const noexcept {
  return empty() ? 0.0 : sum_prob.value() / static_cast<double>(count);
}

double BinStats::gap() const noexcept {
  if (empty()) return 0.0;
  return (static_cast<double>(sum_label) - sum_prob.value()) / static_cast<double>(count);
}

BinStats& BinStats::operator+=(const BinStats& other) noexcept {
  count += other.count;
  sum_prob += other.sum_prob;
  sum_label += other.sum_label;
  return *this;
}

// ---------------------------------------------------------------------------
// CalibrationReport

CalibrationReport::CalibrationReport(std::size_t num_classes, BinConfig cfg)
    : classes_(num_classes), cfg_(cfg) {
  cfg_.validate();
  if (classes_ == 0) throw StructuralError("report needs at least one class");
  bins_.resize(classes_ * cfg_.num_bins);
}

std::size_t CalibrationReport::nonempty_bins(std::size_t c) const noexcept {
  std::size_t n = 0;
  for (const BinStats& b : class_bins(c)) n += b.empty() ? 0 : 1;
  return n;
}

void CalibrationReport::accumulate(const ProbabilityMap& probs, const LabelMap& labels,
                                   std::size_t begin, std::size_t end) {
  if (probs.num_classes() != classes_) {
    throw StructuralError("report has " + std::to_string(classes_) +
                          " classes, probability map has " +
                          std::to_string(probs.num_classes()));
  }
  if (end > probs.num_voxels() || begin > end) {
    throw StructuralError("voxel range [" + std::to_string(begin) + ", " +
                          std::to_string(end) + ") exceeds " +
                          std::to_string(probs.num_voxels()) + " voxels");
  }
  const std::size_t bins = cfg_.num_bins;
  for (std::size_t c = 0; c < classes_; ++c) {
    const auto channel = probs.channel(c);
    BinStats* row = bins_.data() + c * bins;
    for (std::size_t i = begin; i < end; ++i) {
      const double p = channel[i];
      BinStats& b = row[assign_bin(p, cfg_)];
      ++b.count;
      b.sum_prob.add(p);
      b.sum_label += labels.indicator(c, i, classes_) ? 1 : 0;
    }
  }
  total_ += end - begin;
}

CalibrationReport& CalibrationReport::operator+=(const CalibrationReport& other) {
  if (classes_ != other.classes_ || cfg_ != other.cfg_) {
    throw StructuralError("cannot merge a report with " + std::to_string(other.classes_) +
                          " classes and " + std::to_string(other.cfg_.num_bins) +
                          " bins into one with " + std::to_string(classes_) +
                          " classes and " + std::to_string(cfg_.num_bins) + " bins");
  }
  for (std::size_t k = 0; k < bins_.size(); ++k) bins_[k] += other.bins_[k];
  total_ += other.total_;
  return *this;
}

namespace {

void check_pair(const ProbabilityMap& probs, const LabelMap& labels) {
  labels.check_compatible(probs.spatial_shape(), probs.num_classes());
  if (probs.num_voxels() == 0) throw StructuralError("image has no voxels");
}

}  // namespace

CalibrationReport build_report(const ProbabilityMap& probs, const LabelMap& labels,
                               const BinConfig& cfg) {
  check_pair(probs, labels);
  CalibrationReport report(probs.num_classes(), cfg);
  report.accumulate(probs, labels, 0, probs.num_voxels());
  return report;
}

CalibrationReport build_report_parallel(const ProbabilityMap& probs,
                                        const LabelMap& labels,
                                        const BinConfig& cfg, unsigned threads) {
  check_pair(probs, labels);
  const std::size_t n = probs.num_voxels();
  const std::size_t chunks = std::max<std::size_t>(1, std::min<std::size_t>(threads, n));
  if (chunks == 1) return build_report(probs, labels, cfg);

  std::vector<CalibrationReport> partial(chunks, CalibrationReport(probs.num_classes(), cfg));
  {
    std::vector<std::jthread> workers;
    workers.reserve(chunks);
    for (std::size_t k = 0; k < chunks; ++k) {
      const std::size_t begin = n * k / chunks;
      const std::size_t end = n * (k + 1) / chunks;
      workers.emplace_back([&, k, begin, end] {
        partial[k].accumulate(probs, labels, begin, end);
      });
    }
  }
  CalibrationReport out = std::move(partial.front());
  for (std::size_t k = 1; k < chunks; ++k) out += partial[k];
  return out;
}

CalibrationReport merge_reports(const CalibrationReport& a, const CalibrationReport& b) {
  CalibrationReport out = a;
  out += b;
  return out;
}

}  // namespace segcal
