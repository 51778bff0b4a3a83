#include "segcal/diagrams.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "segcal/error.hpp"

namespace segcal {

std::uint64_t ReliabilityDiagram::total_count() const noexcept {
  std::uint64_t n = 0;
  for (const DiagramBin& b : bins) n += b.count;
  return n;
}

ReliabilityDiagram reliability_diagram(const CalibrationReport& report, std::size_t class_id) {
  if (class_id >= report.num_classes()) {
    throw StructuralError("class " + std::to_string(class_id) + " out of range for a report with " +
                          std::to_string(report.num_classes()) + " classes");
  }
  const BinConfig& cfg = report.bin_config();
  ReliabilityDiagram d;
  d.class_id = class_id;
  d.num_bins = cfg.num_bins;
  d.bins.reserve(cfg.num_bins);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (std::size_t m = 0; m < cfg.num_bins; ++m) {
    const BinStats& s = report.bin(class_id, m);
    DiagramBin b;
    b.lo = cfg.lower_edge(m);
    b.hi = cfg.upper_edge(m);
    b.count = s.count;
    b.confidence = s.empty() ? nan : s.expected();
    b.accuracy = s.empty() ? nan : s.observed();
    d.bins.push_back(b);
  }
  return d;
}

// ---------------------------------------------------------------------------
// DatasetHistogram

DatasetHistogram::DatasetHistogram(std::size_t confidence_bins, std::size_t frequency_bins)
    : m_(confidence_bins), k_(frequency_bins), counts_(confidence_bins * frequency_bins, 0) {
  BinConfig{m_}.validate();
  BinConfig{k_}.validate();
}

std::uint64_t DatasetHistogram::total() const noexcept {
  std::uint64_t n = 0;
  for (auto c : counts_) n += c;
  return n;
}

std::uint64_t DatasetHistogram::row_total(std::size_t m) const noexcept {
  std::uint64_t n = 0;
  for (std::size_t k = 0; k < k_; ++k) n += at(m, k);
  return n;
}

void DatasetHistogram::add(std::size_t m, std::size_t k, std::uint64_t count) {
  if (m >= m_ || k >= k_) {
    throw StructuralError("histogram cell (" + std::to_string(m) + "," + std::to_string(k) +
                          ") outside a " + std::to_string(m_) + "x" + std::to_string(k_) +
                          " grid");
  }
  counts_[m * k_ + k] += count;
}

void DatasetHistogram::add_case(const CalibrationReport& report, std::size_t class_id) {
  if (report.num_bins() != m_) {
    throw StructuralError("report has " + std::to_string(report.num_bins()) +
                          " bins, histogram expects " + std::to_string(m_));
  }
  if (class_id >= report.num_classes()) {
    throw StructuralError("class " + std::to_string(class_id) + " out of range for a report with " +
                          std::to_string(report.num_classes()) + " classes");
  }
  const BinConfig freq_cfg{k_};
  for (std::size_t m = 0; m < m_; ++m) {
    const BinStats& s = report.bin(class_id, m);
    if (s.empty()) continue;
    ++counts_[m * k_ + assign_bin(s.observed(), freq_cfg)];
  }
  ++cases_;
}

bool DatasetHistogram::in_diagonal_band(std::size_t m, std::size_t k) const noexcept {
  const double dm = static_cast<double>(m) / static_cast<double>(m_);
  const double dk = static_cast<double>(k) / static_cast<double>(k_);
  // Small slack so exact-boundary cells are not lost to rounding.
  return std::abs(dm - dk) <= 1.0 / static_cast<double>(m_) + 1.0 / static_cast<double>(k_) + 1e-12;
}

std::uint64_t DatasetHistogram::off_diagonal_mass() const noexcept {
  std::uint64_t n = 0;
  for (std::size_t m = 0; m < m_; ++m) {
    for (std::size_t k = 0; k < k_; ++k) {
      if (!in_diagonal_band(m, k)) n += at(m, k);
    }
  }
  return n;
}

DatasetHistogram dataset_histogram(std::span<const CalibrationReport> reports,
                                   std::size_t class_id, std::size_t frequency_bins) {
  if (reports.empty()) throw StructuralError("dataset histogram needs at least one report");
  const std::size_t m = reports.front().num_bins();
  const std::size_t classes = reports.front().num_classes();
  for (const CalibrationReport& r : reports) {
    if (r.num_bins() != m || r.num_classes() != classes) {
      throw StructuralError("dataset histogram reports disagree on classes or bins");
    }
  }
  DatasetHistogram h(m, frequency_bins == 0 ? m : frequency_bins);
  for (const CalibrationReport& r : reports) h.add_case(r, class_id);
  return h;
}

// ---------------------------------------------------------------------------
// CSV

namespace {

std::string format_real(double v) {
  if (std::isnan(v)) return "";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

constexpr const char* kDiagramHeader = "class,bin,lo,hi,count,confidence,accuracy";
constexpr const char* kHistogramHeader = "conf_bin,freq_bin,count";

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

template <typename T>
T parse_number(const std::string& s, std::size_t line_no) {
  T v{};
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw ParseError("bad number '" + s + "' on CSV line " + std::to_string(line_no));
  }
  return v;
}

std::vector<std::string> csv_lines(const std::string& text, const char* header) {
  std::vector<std::string> lines;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  if (lines.empty() || lines.front() != header) {
    throw ParseError(std::string("CSV header must be '") + header + "'");
  }
  return lines;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.close();
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

}  // namespace

std::string diagram_csv(const ReliabilityDiagram& diagram) {
  std::string out = kDiagramHeader;
  out += "\n";
  for (std::size_t m = 0; m < diagram.bins.size(); ++m) {
    const DiagramBin& b = diagram.bins[m];
    out += std::to_string(diagram.class_id) + "," + std::to_string(m) + "," + format_real(b.lo) +
           "," + format_real(b.hi) + "," + std::to_string(b.count) + "," +
           format_real(b.confidence) + "," + format_real(b.accuracy) + "\n";
  }
  return out;
}

std::string histogram_csv(const DatasetHistogram& histogram) {
  std::string out = kHistogramHeader;
  out += "\n";
  for (std::size_t m = 0; m < histogram.confidence_bins(); ++m) {
    for (std::size_t k = 0; k < histogram.frequency_bins(); ++k) {
      if (histogram.at(m, k) == 0) continue;
      out += std::to_string(m) + "," + std::to_string(k) + "," +
             std::to_string(histogram.at(m, k)) + "\n";
    }
  }
  return out;
}

ReliabilityDiagram parse_diagram_csv(const std::string& text) {
  const auto lines = csv_lines(text, kDiagramHeader);
  ReliabilityDiagram d;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (std::size_t l = 1; l < lines.size(); ++l) {
    const auto f = split_fields(lines[l]);
    if (f.size() != 7) {
      throw ParseError("CSV line " + std::to_string(l + 1) + " has " + std::to_string(f.size()) +
                       " fields, expected 7");
    }
    const auto cls = parse_number<std::size_t>(f[0], l + 1);
    const auto bin = parse_number<std::size_t>(f[1], l + 1);
    if (l == 1) d.class_id = cls;
    if (cls != d.class_id || bin != l - 1) {
      throw ParseError("CSV line " + std::to_string(l + 1) + " is out of sequence");
    }
    DiagramBin b;
    b.lo = parse_number<double>(f[2], l + 1);
    b.hi = parse_number<double>(f[3], l + 1);
    b.count = parse_number<std::uint64_t>(f[4], l + 1);
    b.confidence = f[5].empty() ? nan : parse_number<double>(f[5], l + 1);
    b.accuracy = f[6].empty() ? nan : parse_number<double>(f[6], l + 1);
    d.bins.push_back(b);
  }
  d.num_bins = d.bins.size();
  return d;
}

DatasetHistogram parse_histogram_csv(const std::string& text, std::size_t confidence_bins,
                                     std::size_t frequency_bins) {
  const auto lines = csv_lines(text, kHistogramHeader);
  DatasetHistogram h(confidence_bins, frequency_bins);
  for (std::size_t l = 1; l < lines.size(); ++l) {
    const auto f = split_fields(lines[l]);
    if (f.size() != 3) {
      throw ParseError("CSV line " + std::to_string(l + 1) + " has " + std::to_string(f.size()) +
                       " fields, expected 3");
    }
    h.add(parse_number<std::size_t>(f[0], l + 1), parse_number<std::size_t>(f[1], l + 1),
          parse_number<std::uint64_t>(f[2], l + 1));
  }
  return h;
}

void emit_csv(const ReliabilityDiagram& diagram, const std::filesystem::path& path) {
  write_text(path, diagram_csv(diagram));
}

void emit_csv(const DatasetHistogram& histogram, const std::filesystem::path& path) {
  write_text(path, histogram_csv(histogram));
}

// ---------------------------------------------------------------------------
// SVG

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += ch;
    }
  }
  return out;
}

std::string svg_open(int width, int height) {
  return "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
         "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" +
         std::to_string(width) + "\" height=\"" + std::to_string(height) + "\" viewBox=\"0 0 " +
         std::to_string(width) + " " + std::to_string(height) + "\">\n";
}

std::string text_at(double x, double y, const std::string& s, const char* anchor = "middle",
                    double rotate = 0.0, int size = 12) {
  std::string out = "<text x=\"" + num(x) + "\" y=\"" + num(y) + "\" font-family=\"sans-serif\"" +
                    " font-size=\"" + std::to_string(size) + "\" text-anchor=\"" + anchor + "\"";
  if (rotate != 0.0) {
    out += " transform=\"rotate(" + num(rotate) + " " + num(x) + " " + num(y) + ")\"";
  }
  return out + ">" + xml_escape(s) + "</text>\n";
}

// White to dark blue.
std::string heat_color(double t) {
  t = std::clamp(t, 0.0, 1.0);
  const auto channel = [t](double from, double to) {
    return static_cast<int>(std::lround(from + (to - from) * t));
  };
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", channel(235, 8), channel(242, 48),
                channel(250, 107));
  return buf;
}

}  // namespace

std::string diagram_svg(const ReliabilityDiagram& diagram, const SvgStyle& style) {
  const double left = 70, right = 20, top = 40;
  const double plot_w = style.width - left - right;
  const double main_h = (style.height - top - 90) * 0.72;
  const double gap = 20;
  const double count_h = (style.height - top - 90) - main_h - gap;
  const double main_bottom = top + main_h;
  const double count_top = main_bottom + gap;
  const double count_bottom = count_top + count_h;

  std::string svg = svg_open(style.width, style.height);
  svg += "<desc>reliability diagram; class " + std::to_string(diagram.class_id) + "; " +
         std::to_string(diagram.num_bins) + " bins</desc>\n";
  svg += "<rect x=\"0\" y=\"0\" width=\"" + std::to_string(style.width) + "\" height=\"" +
         std::to_string(style.height) + "\" fill=\"white\"/>\n";
  if (!style.title.empty()) svg += text_at(style.width / 2.0, 22, style.title, "middle", 0, 14);

  svg += "<rect x=\"" + num(left) + "\" y=\"" + num(top) + "\" width=\"" + num(plot_w) +
         "\" height=\"" + num(main_h) + "\" fill=\"none\" stroke=\"black\"/>\n";
  for (const DiagramBin& b : diagram.bins) {
    if (b.empty()) continue;
    const double x = left + b.lo * plot_w;
    const double w = (b.hi - b.lo) * plot_w;
    const double h = b.accuracy * main_h;
    svg += "<rect class=\"bar\" x=\"" + num(x) + "\" y=\"" + num(main_bottom - h) +
           "\" width=\"" + num(w) + "\" height=\"" + num(h) + "\" fill=\"" + style.bar_color +
           "\" stroke=\"white\" stroke-width=\"0.5\"/>\n";
    const double cx = left + b.confidence * plot_w;
    const double cy = main_bottom - b.confidence * main_h;
    svg += "<circle class=\"confidence\" cx=\"" + num(cx) + "\" cy=\"" + num(cy) +
           "\" r=\"2.5\" fill=\"black\"/>\n";
  }
  svg += "<line class=\"diagonal\" x1=\"" + num(left) + "\" y1=\"" + num(main_bottom) +
         "\" x2=\"" + num(left + plot_w) + "\" y2=\"" + num(top) + "\" stroke=\"" +
         style.diagonal_color + "\" stroke-dasharray=\"6,4\" stroke-width=\"1.5\"/>\n";

  // Count sub-plot on a log scale.
  std::uint64_t peak = 0;
  for (const DiagramBin& b : diagram.bins) peak = std::max(peak, b.count);
  svg += "<rect x=\"" + num(left) + "\" y=\"" + num(count_top) + "\" width=\"" + num(plot_w) +
         "\" height=\"" + num(count_h) + "\" fill=\"none\" stroke=\"black\"/>\n";
  for (const DiagramBin& b : diagram.bins) {
    if (b.empty()) continue;
    const double frac = std::log1p(static_cast<double>(b.count)) /
                        std::log1p(static_cast<double>(peak));
    const double h = frac * count_h;
    svg += "<rect class=\"count\" x=\"" + num(left + b.lo * plot_w) + "\" y=\"" +
           num(count_bottom - h) + "\" width=\"" + num((b.hi - b.lo) * plot_w) + "\" height=\"" +
           num(h) + "\" fill=\"#7f8c8d\" stroke=\"white\" stroke-width=\"0.5\"/>\n";
  }

  for (int t = 0; t <= 4; ++t) {
    const double v = t / 4.0;
    svg += text_at(left + v * plot_w, count_bottom + 16, num(v));
    svg += text_at(left - 6, main_bottom - v * main_h + 4, num(v), "end");
  }
  svg += text_at(left + plot_w / 2, count_bottom + 40, "Predicted Foreground Probability / Confidence");
  svg += text_at(24, top + main_h / 2, "Empirical Foreground Frequency / Accuracy", "middle", -90);
  svg += text_at(24, count_top + count_h / 2, "Count (log)", "middle", -90);
  svg += "</svg>\n";
  return svg;
}

std::string histogram_svg(const DatasetHistogram& histogram, const SvgStyle& style) {
  const double left = 70, right = 20, top = 40, bottom = 60;
  const double plot_w = style.width - left - right;
  const double plot_h = style.height - top - bottom;
  const double cell_w = plot_w / static_cast<double>(histogram.confidence_bins());
  const double cell_h = plot_h / static_cast<double>(histogram.frequency_bins());
  std::uint64_t peak = 0;
  for (std::size_t m = 0; m < histogram.confidence_bins(); ++m) {
    for (std::size_t k = 0; k < histogram.frequency_bins(); ++k) {
      peak = std::max(peak, histogram.at(m, k));
    }
  }

  std::string svg = svg_open(style.width, style.height);
  svg += "<desc>dataset reliability histogram; " + std::to_string(histogram.num_cases()) +
         " cases; " + std::to_string(histogram.confidence_bins()) + "x" +
         std::to_string(histogram.frequency_bins()) + " cells; color-scale: log</desc>\n";
  svg += "<rect x=\"0\" y=\"0\" width=\"" + std::to_string(style.width) + "\" height=\"" +
         std::to_string(style.height) + "\" fill=\"white\"/>\n";
  if (!style.title.empty()) svg += text_at(style.width / 2.0, 22, style.title, "middle", 0, 14);

  for (std::size_t m = 0; m < histogram.confidence_bins(); ++m) {
    for (std::size_t k = 0; k < histogram.frequency_bins(); ++k) {
      const std::uint64_t n = histogram.at(m, k);
      if (n == 0) continue;
      const double t = std::log1p(static_cast<double>(n)) / std::log1p(static_cast<double>(peak));
      const double x = left + static_cast<double>(m) * cell_w;
      const double y = top + plot_h - static_cast<double>(k + 1) * cell_h;
      svg += "<rect class=\"cell\" x=\"" + num(x) + "\" y=\"" + num(y) + "\" width=\"" +
             num(cell_w) + "\" height=\"" + num(cell_h) + "\" fill=\"" + heat_color(0.15 + 0.85 * t) +
             "\"><title>" + std::to_string(n) + "</title></rect>\n";
    }
  }
  svg += "<rect x=\"" + num(left) + "\" y=\"" + num(top) + "\" width=\"" + num(plot_w) +
         "\" height=\"" + num(plot_h) + "\" fill=\"none\" stroke=\"black\"/>\n";
  svg += "<line class=\"diagonal\" x1=\"" + num(left) + "\" y1=\"" + num(top + plot_h) +
         "\" x2=\"" + num(left + plot_w) + "\" y2=\"" + num(top) + "\" stroke=\"" +
         style.diagonal_color + "\" stroke-dasharray=\"6,4\" stroke-width=\"1\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double v = t / 4.0;
    svg += text_at(left + v * plot_w, top + plot_h + 16, num(v));
    svg += text_at(left - 6, top + plot_h - v * plot_h + 4, num(v), "end");
  }
  svg += text_at(left + plot_w / 2, top + plot_h + 40, "Predicted Foreground Probability / Confidence");
  svg += text_at(24, top + plot_h / 2, "Empirical Foreground Frequency / Accuracy", "middle", -90);
  svg += "</svg>\n";
  return svg;
}

void emit_svg(const ReliabilityDiagram& diagram, const std::filesystem::path& path,
              const SvgStyle& style) {
  write_text(path, diagram_svg(diagram, style));
}

void emit_svg(const DatasetHistogram& histogram, const std::filesystem::path& path,
              const SvgStyle& style) {
  write_text(path, histogram_svg(histogram, style));
}

}  // namespace segcal
