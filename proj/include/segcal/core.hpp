#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace segcal {

// Spatial dimensions of an image, outermost first.
using Shape = std::vector<std::size_t>;

std::size_t shape_volume(const Shape& shape);

// Dense (class, voxel) array stored channel-major: element (c, i) lives at
// c * num_voxels + i. Used for logits and gradients; carries no invariants.
class ChannelArray {
 public:
  ChannelArray() = default;
  ChannelArray(Shape spatial, std::size_t num_classes, double fill = 0.0);
  ChannelArray(Shape spatial, std::size_t num_classes, std::vector<double> values);

  const Shape& spatial_shape() const noexcept { return spatial_; }
  std::size_t num_classes() const noexcept { return classes_; }
  std::size_t num_voxels() const noexcept { return voxels_; }

  double operator()(std::size_t c, std::size_t i) const noexcept {
    return values_[c * voxels_ + i];
  }
  double& operator()(std::size_t c, std::size_t i) noexcept {
    return values_[c * voxels_ + i];
  }

  std::span<const double> channel(std::size_t c) const noexcept {
    return {values_.data() + c * voxels_, voxels_};
  }
  std::span<double> channel(std::size_t c) noexcept {
    return {values_.data() + c * voxels_, voxels_};
  }
  std::span<const double> values() const noexcept { return values_; }
  std::span<double> values() noexcept { return values_; }

  // True when both arrays have the same spatial shape and class count.
  bool same_layout(const ChannelArray& other) const noexcept;

 private:
  Shape spatial_;
  std::size_t classes_ = 0;
  std::size_t voxels_ = 0;
  std::vector<double> values_;
};

// Per-voxel class probabilities for one image. Every value is finite and in
// [0,1]; with two or more classes each voxel sums to one within
// kSumTolerance. A single-channel map is a binary foreground probability.
class ProbabilityMap {
 public:
  static constexpr double kSumTolerance = 1e-5;

  explicit ProbabilityMap(ChannelArray values);
  ProbabilityMap(Shape spatial, std::size_t num_classes, std::vector<double> values);

  const Shape& spatial_shape() const noexcept { return values_.spatial_shape(); }
  std::size_t num_classes() const noexcept { return values_.num_classes(); }
  std::size_t num_voxels() const noexcept { return values_.num_voxels(); }
  double operator()(std::size_t c, std::size_t i) const noexcept { return values_(c, i); }
  std::span<const double> channel(std::size_t c) const noexcept { return values_.channel(c); }
  const ChannelArray& array() const noexcept { return values_; }

 private:
  ChannelArray values_;
};

// Ground-truth class index per voxel. For a single-channel probability map the
// labels are a 0/1 foreground indicator.
class LabelMap {
 public:
  LabelMap() = default;
  LabelMap(Shape spatial, std::vector<std::int32_t> labels);

  const Shape& spatial_shape() const noexcept { return spatial_; }
  std::size_t num_voxels() const noexcept { return labels_.size(); }
  std::int32_t operator[](std::size_t i) const noexcept { return labels_[i]; }
  std::span<const std::int32_t> values() const noexcept { return labels_; }

  // Marginal one-hot indicator Y^c_i, derived on the fly.
  bool indicator(std::size_t c, std::size_t i, std::size_t num_classes) const noexcept {
    return num_classes == 1 ? labels_[i] == 1
                            : labels_[i] == static_cast<std::int32_t>(c);
  }

  // Throws StructuralError on shape mismatch and InputDomainError on labels
  // outside the valid range for `num_classes`.
  void check_compatible(const Shape& spatial, std::size_t num_classes) const;

 private:
  Shape spatial_;
  std::vector<std::int32_t> labels_;
};

// Uniform hard binning of [0,1] into num_bins half-open intervals
// [m/M, (m+1)/M), the last one closed at 1.
struct BinConfig {
  std::size_t num_bins = 20;

  void validate() const;
  double lower_edge(std::size_t m) const noexcept {
    return static_cast<double>(m) / static_cast<double>(num_bins);
  }
  double upper_edge(std::size_t m) const noexcept {
    return static_cast<double>(m + 1) / static_cast<double>(num_bins);
  }
  bool operator==(const BinConfig&) const = default;
};

std::size_t assign_bin(double p, const BinConfig& cfg);

// Order-independent sum of values in [0,1], kept as a 128-bit fixed-point
// number with 62 fractional bits. Addition is exact, so accumulation order,
// chunking and merging never change the result.
class ExactSum {
 public:
  void add(double p) noexcept;
  ExactSum& operator+=(const ExactSum& other) noexcept;
  double value() const noexcept;
  bool operator==(const ExactSum&) const = default;

 private:
  std::uint64_t hi_ = 0;
  std::uint64_t lo_ = 0;
};

struct BinStats {
  std::uint64_t count = 0;
  ExactSum sum_prob;
  std::uint64_t sum_label = 0;

  bool empty() const noexcept { return count == 0; }
  // o: fraction of bin members whose label is the class.
  double observed() const noexcept;
  // e: mean predicted probability of bin members.
  double expected() const noexcept;
  // o - e; zero for an empty bin.
  double gap() const noexcept;

  BinStats& operator+=(const BinStats& other) noexcept;
  bool operator==(const BinStats&) const = default;
};

// Per-class, per-bin accumulation for one image (or a chunk of one).
class CalibrationReport {
 public:
  CalibrationReport() = default;
  CalibrationReport(std::size_t num_classes, BinConfig cfg);

  std::size_t num_classes() const noexcept { return classes_; }
  std::size_t num_bins() const noexcept { return cfg_.num_bins; }
  const BinConfig& bin_config() const noexcept { return cfg_; }
  std::uint64_t total_voxels() const noexcept { return total_; }

  const BinStats& bin(std::size_t c, std::size_t m) const noexcept {
    return bins_[c * cfg_.num_bins + m];
  }
  std::span<const BinStats> class_bins(std::size_t c) const noexcept {
    return {bins_.data() + c * cfg_.num_bins, cfg_.num_bins};
  }
  std::size_t nonempty_bins(std::size_t c) const noexcept;

  // Streams voxels [begin, end) of an already validated pair into the report.
  void accumulate(const ProbabilityMap& probs, const LabelMap& labels,
                  std::size_t begin, std::size_t end);

  CalibrationReport& operator+=(const CalibrationReport& other);
  bool operator==(const CalibrationReport&) const = default;

 private:
  std::size_t classes_ = 0;
  BinConfig cfg_;
  std::uint64_t total_ = 0;
  std::vector<BinStats> bins_;
};

CalibrationReport build_report(const ProbabilityMap& probs, const LabelMap& labels,
                               const BinConfig& cfg);

// Splits the voxels into `threads` contiguous chunks, accumulates them
// concurrently and merges in chunk order. Identical to build_report.
CalibrationReport build_report_parallel(const ProbabilityMap& probs,
                                        const LabelMap& labels,
                                        const BinConfig& cfg, unsigned threads);

CalibrationReport merge_reports(const CalibrationReport& a, const CalibrationReport& b);

}  // namespace segcal
