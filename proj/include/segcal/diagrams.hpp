#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "segcal/core.hpp"

namespace segcal {

struct DiagramBin {
  double lo = 0.0;
  double hi = 0.0;
  std::uint64_t count = 0;
  // Mean predicted probability and observed frequency; NaN for empty bins.
  double confidence = 0.0;
  double accuracy = 0.0;

  bool empty() const noexcept { return count == 0; }
};

// Per-image reliability diagram for one class channel.
struct ReliabilityDiagram {
  std::size_t class_id = 0;
  std::size_t num_bins = 0;
  std::vector<DiagramBin> bins;

  std::uint64_t total_count() const noexcept;
};

ReliabilityDiagram reliability_diagram(const CalibrationReport& report, std::size_t class_id);

// Joint count matrix over (confidence bin m, empirical-frequency bin k).
// Every case adds one count per non-empty confidence bin, at the bin its
// observed frequency falls in.
class DatasetHistogram {
 public:
  DatasetHistogram() = default;
  DatasetHistogram(std::size_t confidence_bins, std::size_t frequency_bins);

  std::size_t confidence_bins() const noexcept { return m_; }
  std::size_t frequency_bins() const noexcept { return k_; }
  std::size_t num_cases() const noexcept { return cases_; }

  std::uint64_t at(std::size_t m, std::size_t k) const noexcept { return counts_[m * k_ + k]; }
  std::uint64_t total() const noexcept;
  std::uint64_t row_total(std::size_t m) const noexcept;

  void add_case(const CalibrationReport& report, std::size_t class_id);
  void add(std::size_t m, std::size_t k, std::uint64_t count);
  void set_num_cases(std::size_t cases) noexcept { cases_ = cases; }

  // Cell (m, k) lies in the diagonal band when |m/M - k/K| <= 1/M + 1/K.
  bool in_diagonal_band(std::size_t m, std::size_t k) const noexcept;
  std::uint64_t off_diagonal_mass() const noexcept;

  bool operator==(const DatasetHistogram&) const = default;

 private:
  std::size_t m_ = 0;
  std::size_t k_ = 0;
  std::size_t cases_ = 0;
  std::vector<std::uint64_t> counts_;
};

// K = 0 selects K = M.
DatasetHistogram dataset_histogram(std::span<const CalibrationReport> reports,
                                   std::size_t class_id, std::size_t frequency_bins = 0);

// CSV: "class,bin,lo,hi,count,confidence,accuracy", one row per bin; empty
// bins leave confidence and accuracy blank. Reals use 17 significant digits.
std::string diagram_csv(const ReliabilityDiagram& diagram);
// CSV: "conf_bin,freq_bin,count", one row per non-zero cell, row-major.
std::string histogram_csv(const DatasetHistogram& histogram);

ReliabilityDiagram parse_diagram_csv(const std::string& text);
DatasetHistogram parse_histogram_csv(const std::string& text, std::size_t confidence_bins,
                                     std::size_t frequency_bins);

void emit_csv(const ReliabilityDiagram& diagram, const std::filesystem::path& path);
void emit_csv(const DatasetHistogram& histogram, const std::filesystem::path& path);

struct SvgStyle {
  int width = 480;
  int height = 560;
  std::string title;
  std::string bar_color = "#3b6fb6";
  std::string diagonal_color = "#c0392b";
};

std::string diagram_svg(const ReliabilityDiagram& diagram, const SvgStyle& style = {});
std::string histogram_svg(const DatasetHistogram& histogram, const SvgStyle& style = {});

void emit_svg(const ReliabilityDiagram& diagram, const std::filesystem::path& path,
              const SvgStyle& style = {});
void emit_svg(const DatasetHistogram& histogram, const std::filesystem::path& path,
              const SvgStyle& style = {});

}  // namespace segcal
