#include "cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "config_file.hpp"
#include "json.hpp"
#include "segcal/calib_loss.hpp"
#include "segcal/diagrams.hpp"
#include "segcal/error.hpp"
#include "segcal/gradcheck.hpp"
#include "segcal/harness.hpp"
#include "segcal/io.hpp"
#include "segcal/metrics.hpp"
#include "segcal/temp_scale.hpp"
#include "segcal/version.hpp"

namespace segcal::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class UsageError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "usage"; }
};

// Tolerances printed and enforced by grad-check.
constexpr double kGradTolerance = 1e-5;
constexpr double kChainGradTolerance = 1e-4;

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  std::replace(s.begin(), s.end(), '\r', ' ');
  return s;
}

std::string absolute_path(const std::string& p) {
  return fs::absolute(fs::path(p)).lexically_normal().string();
}

// Outputs and runtime knobs: never part of the config echo, so a replayed
// manifest is byte-identical to its source.
struct Outputs {
  std::string out;
  std::string svg;
  std::string csv;
  std::string manifest;
  std::string calibrated;
  unsigned threads = 1;
};

RunManifest new_manifest(const std::string& command, json config) {
  RunManifest m;
  m.command = command;
  m.config = std::move(config);
  m.tool_version = kVersion;
  return m;
}

MetricOptions metric_options(const json& cfg) {
  MetricOptions o;
  o.include_background = cfg.value("include_background", true);
  const std::string policy = cfg.value("empty_bins", std::string("exclude"));
  if (policy == "exclude") o.empty_bins = EmptyBinPolicy::kExclude;
  else if (policy == "zero") o.empty_bins = EmptyBinPolicy::kCountAsZero;
  else throw UsageError("--empty-bins must be 'exclude' or 'zero', got '" + policy + "'");
  return o;
}

std::vector<std::size_t> parse_bin_list(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t pos = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(item, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos == 0 || pos != item.size()) throw UsageError("--bins expects integers, got '" + text + "'");
    BinConfig{v}.validate();
    out.push_back(v);
  }
  if (out.empty()) throw UsageError("--bins is empty");
  return out;
}

json case_list_json(const std::vector<CasePaths>& cases, const char* first, const char* second) {
  json arr = json::array();
  for (const CasePaths& c : cases) {
    arr.push_back({{first, absolute_path(c.first.string())},
                   {second, absolute_path(c.second.string())}});
  }
  return arr;
}

std::vector<CasePaths> collect_cases(const std::string& first, const std::string& second,
                                     const std::string& list, const char* first_flag) {
  if (!list.empty()) {
    if (!first.empty() || !second.empty()) {
      throw UsageError(std::string("--cases cannot be combined with ") + first_flag +
                       " or --labels");
    }
    return read_list_file(list);
  }
  if (first.empty() || second.empty()) {
    throw UsageError(std::string(first_flag) + " and --labels are required (or --cases LISTFILE)");
  }
  return {{first, second}};
}

struct LoadedCase {
  ProbabilityMap probs;
  LabelMap labels;
};

LoadedCase load_probability_case(const json& c) {
  ProbabilityMap probs = probability_map_from_tensor(read_tensor(c.at("probs").get<std::string>()));
  LabelMap labels = label_map_from_tensor(read_tensor(c.at("labels").get<std::string>()),
                                          probs.spatial_shape(), probs.num_classes());
  return {std::move(probs), std::move(labels)};
}

CalibrationReport report_for(const LoadedCase& c, std::size_t bins, unsigned threads) {
  const BinConfig cfg{bins};
  return threads > 1 ? build_report_parallel(c.probs, c.labels, cfg, threads)
                     : build_report(c.probs, c.labels, cfg);
}

json summary_json(const CalibrationSummary& s) {
  return {{"ace", s.mean_ace},
          {"ece", s.mean_ece},
          {"mce", s.mean_mce},
          {"per_class", {{"ace", s.per_class_ace}, {"ece", s.per_class_ece}, {"mce", s.per_class_mce}}},
          {"nonempty_bins", s.nonempty_bins_per_class}};
}

json mean_std_json(const MeanStd& v) { return {{"mean", v.mean}, {"std", v.std}}; }

json eval_json(const EvalSummary& e) {
  return {{"dice", mean_std_json(e.dice)},
          {"ace", mean_std_json(e.ace)},
          {"ece", mean_std_json(e.ece)},
          {"mce", mean_std_json(e.mce)}};
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw IoError("write to '" + path.string() + "' failed");
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// Commands. Each takes its config echo and the output settings.

void exec_metrics(const json& cfg, const Outputs& o, std::ostream& out) {
  const MetricOptions options = metric_options(cfg);
  const auto bins = cfg.at("bins").get<std::vector<std::size_t>>();
  std::vector<LoadedCase> cases;
  for (const json& c : cfg.at("cases")) cases.push_back(load_probability_case(c));

  RunManifest m = new_manifest("metrics", cfg);
  m.bins.num_bins = bins.front();
  json sweep = json::array();
  for (std::size_t b = 0; b < bins.size(); ++b) {
    double ace = 0.0, ece = 0.0, mce = 0.0;
    for (std::size_t k = 0; k < cases.size(); ++k) {
      const CalibrationSummary s = summarize(report_for(cases[k], bins[b], o.threads), options);
      ace += s.mean_ace;
      ece += s.mean_ece;
      mce += s.mean_mce;
      if (b == 0) {
        json entry = summary_json(s);
        entry["probs"] = cfg["cases"][k]["probs"];
        entry["labels"] = cfg["cases"][k]["labels"];
        entry["dice"] = dice_score(cases[k].probs, cases[k].labels);
        m.cases.push_back(std::move(entry));
      }
    }
    const double n = static_cast<double>(cases.size());
    sweep.push_back({{"bins", bins[b]}, {"ace", ace / n}, {"ece", ece / n}, {"mce", mce / n}});
    out << "bins " << bins[b] << ": ace " << fmt(ace / n) << " ece " << fmt(ece / n) << " mce "
        << fmt(mce / n) << "\n";
  }
  m.aggregate = {{"cases", cases.size()},
                 {"ace", sweep[0]["ace"]},
                 {"ece", sweep[0]["ece"]},
                 {"mce", sweep[0]["mce"]}};
  if (bins.size() > 1) {
    // Spread of each metric over the sweep relative to its smallest value.
    auto spread = [&](const char* key) {
      double lo = sweep[0][key].get<double>(), hi = lo;
      for (const json& s : sweep) {
        lo = std::min(lo, s[key].get<double>());
        hi = std::max(hi, s[key].get<double>());
      }
      return lo > 0.0 ? (hi - lo) / lo : 0.0;
    };
    m.aggregate["sweep"] = sweep;
    m.aggregate["relative_spread"] = {{"ace", spread("ace")}, {"ece", spread("ece")}, {"mce", spread("mce")}};
    out << "relative spread over bins: ace " << fmt(spread("ace")) << " ece " << fmt(spread("ece"))
        << " mce " << fmt(spread("mce")) << "\n";
  }
  write_manifest(m, o.out);
}

void exec_diagram(const json& cfg, const Outputs& o, std::ostream& out) {
  const LoadedCase c = load_probability_case(cfg.at("cases").at(0));
  const auto class_id = cfg.at("class").get<std::size_t>();
  const auto bins = cfg.at("bins").get<std::size_t>();
  const CalibrationReport report = report_for(c, bins, o.threads);
  const ReliabilityDiagram diagram = reliability_diagram(report, class_id);
  if (!o.csv.empty()) emit_csv(diagram, o.csv);
  if (!o.svg.empty()) {
    SvgStyle style;
    style.title = "class " + std::to_string(class_id);
    emit_svg(diagram, o.svg, style);
  }
  const CalibrationSummary s = summarize(report, metric_options(cfg));
  RunManifest m = new_manifest("diagram", cfg);
  m.bins.num_bins = bins;
  json entry = {{"probs", cfg["cases"][0]["probs"]},
                {"labels", cfg["cases"][0]["labels"]},
                {"class", class_id},
                {"ace", s.per_class_ace.at(class_id)},
                {"ece", s.per_class_ece.at(class_id)},
                {"mce", s.per_class_mce.at(class_id)},
                {"nonempty_bins", s.nonempty_bins_per_class.at(class_id)}};
  m.cases.push_back(entry);
  m.aggregate = {{"voxels", diagram.total_count()}, {"ace", entry["ace"]}, {"ece", entry["ece"]},
                 {"mce", entry["mce"]}};
  write_manifest(m, o.manifest);
  out << "class " << class_id << ": ace " << fmt(entry["ace"]) << " ece " << fmt(entry["ece"])
      << " mce " << fmt(entry["mce"]) << "\n";
}

void exec_histogram(const json& cfg, const Outputs& o, std::ostream& out) {
  const auto class_id = cfg.at("class").get<std::size_t>();
  const auto bins = cfg.at("bins").get<std::size_t>();
  const auto freq_bins = cfg.at("freq_bins").get<std::size_t>();
  const MetricOptions options = metric_options(cfg);
  RunManifest m = new_manifest("histogram", cfg);
  m.bins.num_bins = bins;
  std::vector<CalibrationReport> reports;
  for (const json& c : cfg.at("cases")) {
    const LoadedCase loaded = load_probability_case(c);
    reports.push_back(report_for(loaded, bins, o.threads));
    const CalibrationSummary s = summarize(reports.back(), options);
    if (class_id >= s.per_class_ace.size()) {
      throw StructuralError("class " + std::to_string(class_id) + " out of range for " +
                            c.at("probs").get<std::string>());
    }
    m.cases.push_back({{"probs", c["probs"]},
                       {"labels", c["labels"]},
                       {"ace", s.per_class_ace[class_id]},
                       {"ece", s.per_class_ece[class_id]},
                       {"mce", s.per_class_mce[class_id]}});
  }
  const DatasetHistogram h = dataset_histogram(reports, class_id, freq_bins);
  if (!o.csv.empty()) emit_csv(h, o.csv);
  if (!o.svg.empty()) {
    SvgStyle style;
    style.title = "class " + std::to_string(class_id) + ", " + std::to_string(reports.size()) + " cases";
    emit_svg(h, o.svg, style);
  }
  const double total = static_cast<double>(h.total());
  m.aggregate = {{"cases", reports.size()},
                 {"total", h.total()},
                 {"off_diagonal_mass", h.off_diagonal_mass()},
                 {"off_diagonal_fraction", total > 0 ? h.off_diagonal_mass() / total : 0.0}};
  write_manifest(m, o.manifest);
  out << "cases " << reports.size() << ", entries " << h.total() << ", off-diagonal "
      << h.off_diagonal_mass() << "\n";
}

void exec_temp_fit(const json& cfg, const Outputs& o, std::ostream& out) {
  std::vector<ChannelArray> logits;
  std::vector<LabelMap> labels;
  for (const json& c : cfg.at("cases")) {
    logits.push_back(channel_array_from_tensor(read_tensor(c.at("logits").get<std::string>())));
    labels.push_back(label_map_from_tensor(read_tensor(c.at("labels").get<std::string>()),
                                           logits.back().spatial_shape(),
                                           logits.back().num_classes()));
  }
  TemperatureFitOptions fo;
  fo.seed = cfg.at("seed").get<std::uint64_t>();
  fo.max_voxels = cfg.at("max_voxels").get<std::size_t>();
  const TemperatureFit fit = fit_temperature(logits, labels, fo);
  const BinConfig bins{cfg.at("bins").get<std::size_t>()};
  const MetricOptions options = metric_options(cfg);

  RunManifest m = new_manifest("temp-fit", cfg);
  m.seed = fo.seed;
  m.bins = bins;
  m.temperature = fit.temperature;
  double before = 0.0, after = 0.0;
  bool argmax_unchanged = true;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    const ProbabilityMap p0 = softmax(logits[k]);
    const ProbabilityMap p1 = apply_temperature(logits[k], fit.temperature);
    const double a0 = summarize(build_report(p0, labels[k], bins), options).mean_ace;
    const double a1 = summarize(build_report(p1, labels[k], bins), options).mean_ace;
    const bool same = hard_prediction(p0) == hard_prediction(p1);
    argmax_unchanged = argmax_unchanged && same;
    before += a0;
    after += a1;
    m.cases.push_back({{"logits", cfg["cases"][k]["logits"]},
                       {"labels", cfg["cases"][k]["labels"]},
                       {"ace_before", a0},
                       {"ace_after", a1},
                       {"nll_before", temperature_nll(logits[k], labels[k], 1.0)},
                       {"nll_after", temperature_nll(logits[k], labels[k], fit.temperature)},
                       {"argmax_unchanged", same}});
  }
  const double n = static_cast<double>(logits.size());
  m.aggregate = {{"temperature", fit.temperature},
                 {"final_nll", fit.final_nll},
                 {"baseline_nll", fit.baseline_nll},
                 {"iterations", fit.iterations},
                 {"voxels_used", fit.voxels_used},
                 {"weakly_identified", fit.weakly_identified},
                 {"ace_before", before / n},
                 {"ace_after", after / n},
                 {"argmax_unchanged", argmax_unchanged}};
  if (!o.calibrated.empty()) {
    if (logits.size() != 1) throw UsageError("--calibrated needs a single case");
    write_tensor(tensor_from_channel_array(apply_temperature(logits[0], fit.temperature).array()),
                 o.calibrated);
  }
  write_manifest(m, o.out);
  out << "temperature " << fmt(fit.temperature) << " (nll " << fmt(fit.baseline_nll) << " -> "
      << fmt(fit.final_nll) << "), ace " << fmt(before / n) << " -> " << fmt(after / n) << "\n";
  if (fit.weakly_identified) {
    out << "note: every voxel has the same label; the temperature is weakly identified\n";
  }
}

void exec_train_demo(const json& cfg, const Outputs& o, std::ostream& out) {
  const DemoConfig demo = demo_config_from_json(cfg);
  const fs::path dir = o.out;
  fs::create_directories(dir);
  RunManifest m = new_manifest("train-demo", demo_config_to_json(demo));
  m.seed = demo.seeds.front();
  m.bins = demo.train.bins;
  m.loss_spec = demo.train.loss.to_string();
  const MetricOptions& metric = demo.train.loss_options.calibration;
  json per_seed = json::array();
  double dice = 0.0, ace = 0.0, ts_ace = 0.0;
  for (std::uint64_t seed : demo.seeds) {
    TrainConfig t = demo.train;
    t.data_seed = seed;
    t.init_seed = seed;
    const DatasetSplit split = make_split(t);
    const TrainResult r = train(t, split.train, split.val);
    const EvalSummary test = evaluate(r.model, split.test, t.bins, metric);
    const std::string tag = "seed" + std::to_string(seed);
    write_text(dir / ("history_" + tag + ".csv"), history_csv(r.history));
    TensorFile weights;
    weights.shape = {r.model.parameter_count()};
    weights.payload = std::vector<double>(r.model.parameters().begin(), r.model.parameters().end());
    write_tensor(weights, dir / ("weights_" + tag + ".npy"));

    json entry = {{"seed", seed}, {"best_epoch", r.best_epoch}, {"test", eval_json(test)}};
    std::optional<EvalSummary> scaled;
    if (demo.temperature_scaling) {
      const TemperatureFit fit = fit_model_temperature(r.model, split.val, {.seed = seed});
      scaled = evaluate(r.model, split.test, t.bins, metric, fit.temperature);
      entry["temperature"] = fit.temperature;
      entry["test_scaled"] = eval_json(*scaled);
      ts_ace += scaled->ace.mean;
      if (demo.seeds.size() == 1) m.temperature = fit.temperature;
    }
    for (std::size_t k = 0; k < test.cases.size(); ++k) {
      json c = {{"seed", seed},
                {"case", split.test[k].seed},
                {"dice", test.cases[k].dice},
                {"ace", test.cases[k].ace},
                {"ece", test.cases[k].ece},
                {"mce", test.cases[k].mce}};
      if (scaled) c["ace_scaled"] = scaled->cases[k].ace;
      m.cases.push_back(std::move(c));
    }
    per_seed.push_back(entry);
    dice += test.dice.mean;
    ace += test.ace.mean;
    out << tag << ": best epoch " << r.best_epoch << ", test dice " << fmt(test.dice.mean)
        << " ace " << fmt(test.ace.mean) << " ece " << fmt(test.ece.mean) << " mce "
        << fmt(test.mce.mean);
    if (scaled) {
      out << " | T " << fmt(entry["temperature"]) << " ace " << fmt(scaled->ace.mean);
    }
    out << "\n";
  }
  const double n = static_cast<double>(demo.seeds.size());
  m.aggregate = {{"seeds", per_seed}, {"mean_test_dice", dice / n}, {"mean_test_ace", ace / n}};
  if (demo.temperature_scaling) m.aggregate["mean_test_ace_scaled"] = ts_ace / n;
  write_manifest(m, o.manifest.empty() ? (dir / "manifest.json").string() : o.manifest);
}

int exec_grad_check(const json& cfg, const Outputs& o, std::ostream& out) {
  const LossSpec spec = LossSpec::parse(cfg.at("loss").get<std::string>());
  GradCheckOptions go;
  go.trials = cfg.at("trials").get<int>();
  go.seed = cfg.at("seed").get<std::uint64_t>();
  go.through_softmax = cfg.at("through_softmax").get<bool>();
  go.max_voxels = cfg.at("max_voxels").get<std::size_t>();
  const GradCheckResult r = check_gradients(spec, go);
  const double tol = go.through_softmax ? kChainGradTolerance : kGradTolerance;
  const bool passed = r.max_relative_error < tol;

  RunManifest m = new_manifest("grad-check", cfg);
  m.seed = go.seed;
  m.loss_spec = spec.to_string();
  m.aggregate = {{"trials", r.trials},
                 {"redrawn", r.redrawn},
                 {"max_relative_error", r.max_relative_error},
                 {"mean_relative_error", r.mean_relative_error},
                 {"tolerance", tol},
                 {"passed", passed}};
  write_manifest(m, o.manifest);
  char buf[160];
  std::snprintf(buf, sizeof buf, "max relative error %.3e over %d trials (tolerance %.0e): %s\n",
                r.max_relative_error, r.trials, tol, passed ? "ok" : "FAILED");
  out << buf;
  if (!passed) {
    throw std::runtime_error("analytic gradient disagrees with finite differences (max relative error " +
                             fmt(r.max_relative_error) + ")");
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------

int parse_and_run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Segmentation calibration metrics, losses and diagnostics."};
  app.name("segcal");
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);
  app.fallthrough(false);

  Outputs o;
  std::string replay;
  // Inputs are kept per command; `inputs` lists them so --replay can refuse
  // them.
  std::vector<CLI::Option*> inputs;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--threads", o.threads, "Worker threads for report building")
        ->check(CLI::PositiveNumber);
    sub->add_option("--replay", replay, "Re-run the configuration recorded in a manifest")
        ->check(CLI::ExistingFile);
  };
  auto input = [&](CLI::Option* opt) {
    inputs.push_back(opt);
    return opt;
  };

  std::string probs, labels, logits, list, bins = "20", empty_bins = "exclude", loss = "ace",
                                                  config_path, loss_override;
  std::size_t class_id = 1, freq_bins = 0, max_voxels = 1'000'000, grad_voxels = 200;
  std::uint64_t seed = 0;
  int trials = 100, epochs_override = -1;
  bool exclude_background = false, chain = false;

  CLI::App* metrics = app.add_subcommand("metrics", "mL1-ECE/ACE/MCE of predictions");
  input(metrics->add_option("--probs", probs, "Probability tensor (C, spatial...)"));
  input(metrics->add_option("--labels", labels, "Label tensor"));
  input(metrics->add_option("--cases", list, "LISTFILE of probs,labels pairs"));
  input(metrics->add_option("--bins", bins, "Bin count, or a comma-separated sweep"));
  input(metrics->add_flag("--exclude-background", exclude_background,
                          "Leave class 0 out of the class average"));
  input(metrics->add_option("--empty-bins", empty_bins, "exclude | zero"));
  metrics->add_option("--out", o.out, "Report (run manifest) path")->required();
  common(metrics);

  CLI::App* diagram = app.add_subcommand("diagram", "Reliability diagram of one class");
  input(diagram->add_option("--probs", probs));
  input(diagram->add_option("--labels", labels));
  input(diagram->add_option("--class", class_id, "Class index"));
  input(diagram->add_option("--bins", bins));
  diagram->add_option("--svg", o.svg);
  diagram->add_option("--csv", o.csv);
  diagram->add_option("--manifest", o.manifest, "Default: <first output>.manifest.json");
  common(diagram);

  CLI::App* histogram = app.add_subcommand("histogram", "Dataset calibration histogram");
  input(histogram->add_option("--cases", list, "LISTFILE of probs,labels pairs"));
  input(histogram->add_option("--class", class_id));
  input(histogram->add_option("--bins", bins));
  input(histogram->add_option("--freq-bins", freq_bins, "Frequency bins (default: --bins)"));
  histogram->add_option("--svg", o.svg);
  histogram->add_option("--csv", o.csv);
  histogram->add_option("--manifest", o.manifest, "Default: <first output>.manifest.json");
  common(histogram);

  CLI::App* temp_fit = app.add_subcommand("temp-fit", "Fit a temperature by minimising NLL");
  input(temp_fit->add_option("--logits", logits, "Logit tensor (C, spatial...)"));
  input(temp_fit->add_option("--labels", labels));
  input(temp_fit->add_option("--cases", list, "LISTFILE of logits,labels pairs"));
  input(temp_fit->add_option("--seed", seed, "Subsampling seed"));
  input(temp_fit->add_option("--max-voxels", max_voxels, "Subsampling cap"));
  input(temp_fit->add_option("--bins", bins, "Bins for the before/after ACE"));
  temp_fit->add_option("--out", o.out, "Manifest path")->required();
  temp_fit->add_option("--calibrated", o.calibrated, "Write the scaled probabilities (one case)");
  common(temp_fit);

  CLI::App* demo = app.add_subcommand("train-demo", "Train and evaluate the synthetic toy model");
  input(demo->add_option("--config", config_path, "TOML-subset or JSON config")
            ->check(CLI::ExistingFile));
  input(demo->add_option("--loss", loss_override, "Override the loss spec, e.g. dice+ace"));
  input(demo->add_option("--epochs", epochs_override, "Override the epoch count"));
  demo->add_option("--out", o.out, "Output directory")->required();
  demo->add_option("--manifest", o.manifest, "Default: <out>/manifest.json");
  common(demo);

  CLI::App* grad = app.add_subcommand("grad-check", "Finite-difference check of loss gradients");
  input(grad->add_option("--loss", loss, "Loss spec, e.g. ace or dice+ace"));
  input(grad->add_option("--trials", trials)->check(CLI::PositiveNumber));
  input(grad->add_option("--seed", seed));
  input(grad->add_flag("--through-softmax", chain, "Differentiate with respect to logits"));
  input(grad->add_option("--max-voxels", grad_voxels));
  grad->add_option("--manifest", o.manifest, "Default: segcal-grad-check.json");
  common(grad);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << kVersion << "\n";
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    throw UsageError(e.what());
  }

  CLI::App* sub = app.get_subcommands().front();
  const std::string command = sub->get_name();
  if (command == "diagram" || command == "histogram") {
    if (o.svg.empty() && o.csv.empty()) throw UsageError(command + " needs --svg and/or --csv");
    if (o.manifest.empty()) o.manifest = (o.csv.empty() ? o.svg : o.csv) + ".manifest.json";
  }
  if (command == "grad-check" && o.manifest.empty()) o.manifest = "segcal-grad-check.json";

  json cfg;
  if (!replay.empty()) {
    for (CLI::Option* opt : inputs) {
      if (opt->count() > 0 && sub->get_option_no_throw(opt->get_name()) == opt) {
        throw UsageError("--replay cannot be combined with " + opt->get_name());
      }
    }
    const RunManifest source = read_manifest(replay);
    if (source.command != command) {
      throw UsageError("manifest " + replay + " records '" + source.command + "', not '" +
                       command + "'");
    }
    cfg = source.config;
  } else if (command == "metrics") {
    cfg = {{"cases", case_list_json(collect_cases(probs, labels, list, "--probs"), "probs", "labels")},
           {"bins", parse_bin_list(bins)},
           {"include_background", !exclude_background},
           {"empty_bins", empty_bins}};
    metric_options(cfg);
  } else if (command == "diagram") {
    if (probs.empty() || labels.empty()) throw UsageError("diagram needs --probs and --labels");
    const auto b = parse_bin_list(bins);
    if (b.size() != 1) throw UsageError("diagram takes a single --bins value");
    cfg = {{"cases", case_list_json({{probs, labels}}, "probs", "labels")},
           {"class", class_id},
           {"bins", b.front()}};
  } else if (command == "histogram") {
    if (list.empty()) throw UsageError("histogram needs --cases LISTFILE");
    const auto b = parse_bin_list(bins);
    if (b.size() != 1) throw UsageError("histogram takes a single --bins value");
    if (freq_bins == 0) freq_bins = b.front();
    BinConfig{freq_bins}.validate();
    cfg = {{"cases", case_list_json(read_list_file(list), "probs", "labels")},
           {"class", class_id},
           {"bins", b.front()},
           {"freq_bins", freq_bins}};
  } else if (command == "temp-fit") {
    const auto b = parse_bin_list(bins);
    if (b.size() != 1) throw UsageError("temp-fit takes a single --bins value");
    cfg = {{"cases", case_list_json(collect_cases(logits, labels, list, "--logits"), "logits", "labels")},
           {"seed", seed},
           {"max_voxels", max_voxels},
           {"bins", b.front()}};
  } else if (command == "train-demo") {
    json doc = config_path.empty() ? json::object() : load_config_document(config_path);
    if (!loss_override.empty()) doc["loss"] = loss_override;
    if (epochs_override >= 0) doc["epochs"] = epochs_override;
    cfg = demo_config_to_json(demo_config_from_json(doc));
  } else if (command == "grad-check") {
    cfg = {{"loss", LossSpec::parse(loss).to_string()},
           {"trials", trials},
           {"seed", seed},
           {"through_softmax", chain},
           {"max_voxels", grad_voxels}};
  }

  if (command == "metrics") exec_metrics(cfg, o, out);
  else if (command == "diagram") exec_diagram(cfg, o, out);
  else if (command == "histogram") exec_histogram(cfg, o, out);
  else if (command == "temp-fit") exec_temp_fit(cfg, o, out);
  else if (command == "train-demo") exec_train_demo(cfg, o, out);
  else if (command == "grad-check") return exec_grad_check(cfg, o, out);
  (void)err;
  return kExitOk;
}

}  // namespace

std::string usage_text() {
  return "usage: segcal <command> [options]\n"
         "\n"
         "commands:\n"
         "  metrics     --probs P --labels L | --cases LISTFILE  [--bins 20[,50,...]] --out report.json\n"
         "  diagram     --probs P --labels L --class k [--bins 20] [--svg out.svg] [--csv out.csv]\n"
         "  histogram   --cases LISTFILE --class k [--bins 20] [--freq-bins 20] [--svg ...] [--csv ...]\n"
         "  temp-fit    --logits Z --labels L | --cases LISTFILE  --out manifest.json\n"
         "  train-demo  [--config cfg.toml] --out dir/\n"
         "  grad-check  [--loss ace] [--trials 100] [--through-softmax]\n"
         "\n"
         "Every command accepts --threads N and --replay MANIFEST; `segcal <command> --help`\n"
         "lists all options. Exit codes: 0 ok, 1 usage, 2 data error, 3 internal error.\n";
}

std::vector<CasePaths> read_list_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open list file " + path.string());
  const fs::path base = path.parent_path();
  std::vector<CasePaths> out;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos || line[first] == '#') continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos || line.find(',', comma + 1) != std::string::npos) {
      throw ParseError(path.string() + ":" + std::to_string(n) +
                       ": expected exactly one ',' between two paths");
    }
    auto strip = [](std::string s) {
      s.erase(0, s.find_first_not_of(" \t"));
      s.erase(s.find_last_not_of(" \t") + 1);
      return s;
    };
    const std::string a = strip(line.substr(0, comma));
    const std::string b = strip(line.substr(comma + 1));
    if (a.empty() || b.empty()) {
      throw ParseError(path.string() + ":" + std::to_string(n) + ": empty path");
    }
    auto resolve = [&](const std::string& p) {
      const fs::path q(p);
      return q.is_absolute() ? q : base / q;
    };
    out.push_back({resolve(a), resolve(b)});
  }
  if (out.empty()) throw ParseError(path.string() + ": no cases listed");
  return out;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  if (args.empty()) {
    err << usage_text();
    return kExitUsage;
  }
  auto report = [&](const char* kind, const std::string& what, int code) {
    err << "segcal: error[" << kind << "]: " << one_line(what) << "\n";
    return code;
  };
  try {
    return parse_and_run(args, out, err);
  } catch (const UsageError& e) {
    return report(e.kind(), e.what(), kExitUsage);
  } catch (const ConfigError& e) {
    return report(e.kind(), e.what(), kExitUsage);
  } catch (const Error& e) {
    return report(e.kind(), e.what(), kExitData);
  } catch (const nlohmann::json::exception& e) {
    return report("parse", e.what(), kExitData);
  } catch (const fs::filesystem_error& e) {
    return report("io", e.what(), kExitData);
  } catch (const std::exception& e) {
    return report("internal", e.what(), kExitInternal);
  }
}

int run(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int k = 1; k < argc; ++k) args.emplace_back(argv[k]);
  return run(args, std::cout, std::cerr);
}

}  // namespace segcal::cli
