#include "segcal/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <random>

#include "segcal/calib_loss.hpp"
#include "segcal/error.hpp"

namespace segcal {

// ---------------------------------------------------------------------------
// Synthetic data

namespace {

struct Blob {
  double cx, cy, rx, ry, angle;
};

// Approximate signed distance to an ellipse boundary, in pixels.
double blob_distance(const Blob& b, double x, double y) {
  const double dx = x - b.cx;
  const double dy = y - b.cy;
  const double c = std::cos(b.angle);
  const double s = std::sin(b.angle);
  const double u = (c * dx + s * dy) / b.rx;
  const double v = (-s * dx + c * dy) / b.ry;
  const double r = std::sqrt(u * u + v * v);
  return (r - 1.0) * std::min(b.rx, b.ry);
}

// Same function as std::tanh, noticeably cheaper on glibc; training time is
// dominated by the hidden activations.
inline double fast_tanh(double a) { return 1.0 - 2.0 / (1.0 + std::exp(2.0 * a)); }

}  // namespace

SyntheticCase generate_synthetic_case(std::uint64_t seed, std::size_t size,
                                      const SyntheticConfig& cfg) {
  if (size < kMinSyntheticSize) {
    throw ConfigError("synthetic images need size >= " + std::to_string(kMinSyntheticSize) +
                      ", got " + std::to_string(size));
  }
  if (cfg.min_blobs < 1 || cfg.max_blobs < cfg.min_blobs || !(cfg.min_foreground > 0.0) ||
      !(cfg.max_foreground < 1.0) || cfg.min_foreground >= cfg.max_foreground) {
    throw ConfigError("synthetic config needs 1 <= min_blobs <= max_blobs and "
                      "0 < min_foreground < max_foreground < 1");
  }

  std::mt19937_64 rng(seed);
  const auto s = static_cast<double>(size);
  const std::size_t n = size * size;
  std::vector<double> sd(n);
  std::vector<std::int32_t> labels(n);

  bool accepted = false;
  for (int attempt = 0; attempt < 1000 && !accepted; ++attempt) {
    std::uniform_int_distribution<std::size_t> count_dist(cfg.min_blobs, cfg.max_blobs);
    std::uniform_real_distribution<double> centre(0.15 * s, 0.85 * s);
    std::uniform_real_distribution<double> radius(0.08 * s, 0.22 * s);
    std::uniform_real_distribution<double> angle(0.0, 3.14159265358979323846);
    std::vector<Blob> blobs(count_dist(rng));
    for (Blob& b : blobs) b = {centre(rng), centre(rng), radius(rng), radius(rng), angle(rng)};

    std::size_t fg = 0;
    for (std::size_t yy = 0; yy < size; ++yy) {
      for (std::size_t xx = 0; xx < size; ++xx) {
        double d = std::numeric_limits<double>::infinity();
        for (const Blob& b : blobs) {
          d = std::min(d, blob_distance(b, static_cast<double>(xx) + 0.5,
                                        static_cast<double>(yy) + 0.5));
        }
        const std::size_t i = yy * size + xx;
        sd[i] = d;
        labels[i] = d < 0.0 ? 1 : 0;
        fg += labels[i];
      }
    }
    const double frac = static_cast<double>(fg) / static_cast<double>(n);
    accepted = frac >= cfg.min_foreground && frac <= cfg.max_foreground;
  }
  if (!accepted) {
    throw ConfigError("could not draw blobs within the foreground band for seed " +
                      std::to_string(seed));
  }

  SyntheticCase out;
  out.seed = seed;
  out.features = ChannelArray({size, size}, kSyntheticFeatures);
  std::normal_distribution<double> unit(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double d = sd[i];
    const double edge = std::exp(-d * d / (2.0 * cfg.boundary_width * cfg.boundary_width));
    const double intensity = 1.0 / (1.0 + std::exp(d / cfg.edge_softness));
    out.features(0, i) = std::tanh(-d / 4.0) + cfg.distance_noise * unit(rng);
    out.features(1, i) =
        intensity + (cfg.intensity_noise + cfg.boundary_noise * edge) * unit(rng);
    out.features(2, i) = 1.0;
  }
  out.labels = LabelMap({size, size}, std::move(labels));
  out.signed_distance = std::move(sd);
  return out;
}

std::vector<SyntheticCase> generate_cases(std::uint64_t first_seed, std::size_t count,
                                          std::size_t size, const SyntheticConfig& cfg) {
  std::vector<SyntheticCase> cases;
  cases.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    cases.push_back(generate_synthetic_case(first_seed + k, size, cfg));
  }
  return cases;
}

// ---------------------------------------------------------------------------
// ToySegmenter

ToySegmenter::ToySegmenter(std::size_t features, std::size_t hidden, std::size_t classes)
    : features_(features),
      hidden_(hidden),
      classes_(classes),
      params_(hidden * features + hidden + classes * hidden + classes, 0.0) {
  if (features == 0 || hidden == 0 || classes == 0) {
    throw ConfigError("model dimensions must be positive");
  }
}

ToySegmenter ToySegmenter::initialized(std::size_t features, std::size_t hidden,
                                       std::size_t classes, std::uint64_t seed) {
  ToySegmenter m(features, hidden, classes);
  std::mt19937_64 rng(seed);
  const double a1 = std::sqrt(6.0 / static_cast<double>(features + hidden));
  const double a2 = std::sqrt(6.0 / static_cast<double>(hidden + classes));
  std::uniform_real_distribution<double> u1(-a1, a1);
  std::uniform_real_distribution<double> u2(-a2, a2);
  double* p = m.params_.data();
  for (std::size_t k = 0; k < hidden * features; ++k) *p++ = u1(rng);
  p += hidden;
  for (std::size_t k = 0; k < classes * hidden; ++k) *p++ = u2(rng);
  return m;
}

ToySegmenter ToySegmenter::from_parameters(std::size_t features, std::size_t hidden,
                                           std::size_t classes, std::vector<double> params) {
  ToySegmenter m(features, hidden, classes);
  if (params.size() != m.params_.size()) {
    throw StructuralError("model with " + std::to_string(features) + "-" +
                          std::to_string(hidden) + "-" + std::to_string(classes) +
                          " layout needs " + std::to_string(m.params_.size()) +
                          " parameters, got " + std::to_string(params.size()));
  }
  m.params_ = std::move(params);
  return m;
}

void ToySegmenter::check_features(const ChannelArray& features) const {
  if (features.num_classes() != features_) {
    throw StructuralError("model expects " + std::to_string(features_) + " feature channels, got " +
                          std::to_string(features.num_classes()));
  }
}

ChannelArray ToySegmenter::forward(const ChannelArray& features,
                                   std::vector<double>* hidden) const {
  check_features(features);
  const double* w1 = params_.data();
  const double* b1 = w1 + hidden_ * features_;
  const double* w2 = b1 + hidden_;
  const double* b2 = w2 + classes_ * hidden_;

  ChannelArray logits(features.spatial_shape(), classes_);
  std::vector<double> x(features_), scratch(hidden_);
  if (hidden) hidden->resize(features.num_voxels() * hidden_);
  for (std::size_t i = 0; i < features.num_voxels(); ++i) {
    double* h = hidden ? hidden->data() + i * hidden_ : scratch.data();
    for (std::size_t f = 0; f < features_; ++f) x[f] = features(f, i);
    for (std::size_t j = 0; j < hidden_; ++j) {
      double a = b1[j];
      for (std::size_t f = 0; f < features_; ++f) a += w1[j * features_ + f] * x[f];
      h[j] = fast_tanh(a);
    }
    for (std::size_t c = 0; c < classes_; ++c) {
      double z = b2[c];
      for (std::size_t j = 0; j < hidden_; ++j) z += w2[c * hidden_ + j] * h[j];
      logits(c, i) = z;
    }
  }
  return logits;
}

void ToySegmenter::backward(const ChannelArray& features, std::span<const double> hidden,
                            const ChannelArray& grad_logits, std::span<double> grad) const {
  check_features(features);
  if (grad.size() != params_.size() || grad_logits.num_classes() != classes_ ||
      grad_logits.num_voxels() != features.num_voxels() ||
      (!hidden.empty() && hidden.size() != features.num_voxels() * hidden_)) {
    throw StructuralError("model backward: gradient buffers do not match the model");
  }
  const double* w1 = params_.data();
  const double* b1 = w1 + hidden_ * features_;
  const double* w2 = b1 + hidden_;
  double* gw1 = grad.data();
  double* gb1 = gw1 + hidden_ * features_;
  double* gw2 = gb1 + hidden_;
  double* gb2 = gw2 + classes_ * hidden_;

  std::vector<double> x(features_), scratch(hidden_), gh(hidden_);
  for (std::size_t i = 0; i < features.num_voxels(); ++i) {
    for (std::size_t f = 0; f < features_; ++f) x[f] = features(f, i);
    const double* h = scratch.data();
    if (hidden.empty()) {
      for (std::size_t j = 0; j < hidden_; ++j) {
        double a = b1[j];
        for (std::size_t f = 0; f < features_; ++f) a += w1[j * features_ + f] * x[f];
        scratch[j] = fast_tanh(a);
      }
    } else {
      h = hidden.data() + i * hidden_;
    }
    std::fill(gh.begin(), gh.end(), 0.0);
    for (std::size_t c = 0; c < classes_; ++c) {
      const double gz = grad_logits(c, i);
      gb2[c] += gz;
      for (std::size_t j = 0; j < hidden_; ++j) {
        gw2[c * hidden_ + j] += gz * h[j];
        gh[j] += w2[c * hidden_ + j] * gz;
      }
    }
    for (std::size_t j = 0; j < hidden_; ++j) {
      const double ga = gh[j] * (1.0 - h[j] * h[j]);
      gb1[j] += ga;
      for (std::size_t f = 0; f < features_; ++f) gw1[j * features_ + f] += ga * x[f];
    }
  }
}

ModelLoss model_loss(const ToySegmenter& model, std::span<const SyntheticCase> cases,
                     const LossSpec& spec, const BinConfig& bins,
                     const CombinedLossOptions& options) {
  if (cases.empty()) throw StructuralError("model loss needs at least one case");
  ModelLoss out;
  out.gradient.assign(model.parameter_count(), 0.0);
  const double inv_cases = 1.0 / static_cast<double>(cases.size());
  std::vector<double> hidden;
  for (const SyntheticCase& c : cases) {
    const SoftmaxGrad sm = softmax_with_grad(model.forward(c.features, &hidden));
    LossOutput loss = combined_loss(spec, sm.probs(), c.labels, bins, options);
    out.value += loss.value * inv_cases;
    for (double& g : loss.grad_probs.values()) g *= inv_cases;
    model.backward(c.features, hidden, sm.backward(loss.grad_probs), out.gradient);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

void TrainConfig::validate() const {
  loss.validate();
  bins.validate();
  if (epochs < 0) throw ConfigError("epochs must be non-negative");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("learning rate must be positive");
  }
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0,1)");
  if (hidden == 0) throw ConfigError("hidden width must be positive");
  if (train_cases == 0 || val_cases == 0 || test_cases == 0) {
    throw ConfigError("train, validation and test splits must be non-empty");
  }
  if (image_size < kMinSyntheticSize) {
    throw ConfigError("image size must be at least " + std::to_string(kMinSyntheticSize));
  }
}

DatasetSplit make_split(const TrainConfig& cfg) {
  cfg.validate();
  const std::uint64_t base = cfg.data_seed * 1'000'003ULL;
  DatasetSplit split;
  split.train = generate_cases(base, cfg.train_cases, cfg.image_size, cfg.data);
  split.val = generate_cases(base + 100'000, cfg.val_cases, cfg.image_size, cfg.data);
  split.test = generate_cases(base + 200'000, cfg.test_cases, cfg.image_size, cfg.data);
  return split;
}

TrainResult train(const TrainConfig& cfg, std::span<const SyntheticCase> train_set,
                  std::span<const SyntheticCase> val_set) {
  cfg.validate();
  if (train_set.empty() || val_set.empty()) {
    throw ConfigError("training needs non-empty train and validation sets");
  }
  const std::size_t classes = 2;
  ToySegmenter model = ToySegmenter::initialized(train_set.front().features.num_classes(),
                                                 cfg.hidden, classes, cfg.init_seed);
  TrainResult result;
  result.model = model;
  std::vector<double> velocity(model.parameter_count(), 0.0);
  double best_dice = -1.0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    ModelLoss loss;
    try {
      loss = model_loss(model, train_set, cfg.loss, cfg.bins, cfg.loss_options);
    } catch (const InputDomainError& e) {
      // Overflowing weights surface as non-finite logits inside the softmax.
      throw TrainingError("training diverged at epoch " + std::to_string(epoch) + ": " + e.what(),
                          epoch);
    }
    const bool finite = std::isfinite(loss.value) &&
                        std::all_of(loss.gradient.begin(), loss.gradient.end(),
                                    [](double g) { return std::isfinite(g); });
    if (!finite) {
      throw TrainingError("training diverged: non-finite loss at epoch " + std::to_string(epoch),
                          epoch);
    }
    auto params = model.parameters();
    for (std::size_t k = 0; k < params.size(); ++k) {
      velocity[k] = cfg.momentum * velocity[k] - cfg.learning_rate * loss.gradient[k];
      params[k] += velocity[k];
    }
    if (!std::all_of(params.begin(), params.end(), [](double w) { return std::isfinite(w); })) {
      throw TrainingError("training diverged: non-finite weights after epoch " +
                              std::to_string(epoch),
                          epoch);
    }

    const EvalSummary val = evaluate(model, val_set, cfg.bins, cfg.loss_options.calibration);
    result.history.push_back({epoch, loss.value, val.dice.mean, val.ace.mean});
    if (val.dice.mean > best_dice) {
      best_dice = val.dice.mean;
      result.model = model;
      result.best_epoch = epoch;
    }
  }
  return result;
}

std::string history_csv(std::span<const EpochRecord> history) {
  std::string out = "epoch,train_loss,val_dice,val_ace\n";
  char buf[128];
  for (const EpochRecord& r : history) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g\n", r.epoch, r.train_loss, r.val_dice,
                  r.val_ace);
    out += buf;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

MeanStd mean_std(const std::vector<CaseMetrics>& cases, double CaseMetrics::*field) {
  MeanStd out;
  if (cases.empty()) return out;
  for (const CaseMetrics& c : cases) out.mean += c.*field;
  out.mean /= static_cast<double>(cases.size());
  double var = 0.0;
  for (const CaseMetrics& c : cases) var += (c.*field - out.mean) * (c.*field - out.mean);
  out.std = std::sqrt(var / static_cast<double>(cases.size()));
  return out;
}

double foreground_dice(const std::vector<double>& per_class) {
  if (per_class.size() == 1) return per_class.front();
  double sum = 0.0;
  for (std::size_t c = 1; c < per_class.size(); ++c) sum += per_class[c];
  return sum / static_cast<double>(per_class.size() - 1);
}

}  // namespace

EvalSummary evaluate_predictions(std::span<const ProbabilityMap> probs,
                                 std::span<const LabelMap> labels, const BinConfig& bins,
                                 const MetricOptions& options) {
  if (probs.size() != labels.size()) {
    throw StructuralError("evaluation got " + std::to_string(probs.size()) + " predictions and " +
                          std::to_string(labels.size()) + " label maps");
  }
  EvalSummary out;
  for (std::size_t k = 0; k < probs.size(); ++k) {
    const CalibrationSummary s = summarize(build_report(probs[k], labels[k], bins), options);
    out.cases.push_back({foreground_dice(dice_score(probs[k], labels[k])), s.mean_ace,
                         s.mean_ece, s.mean_mce});
  }
  out.dice = mean_std(out.cases, &CaseMetrics::dice);
  out.ace = mean_std(out.cases, &CaseMetrics::ace);
  out.ece = mean_std(out.cases, &CaseMetrics::ece);
  out.mce = mean_std(out.cases, &CaseMetrics::mce);
  return out;
}

std::vector<ChannelArray> model_logits(const ToySegmenter& model,
                                       std::span<const SyntheticCase> cases) {
  std::vector<ChannelArray> out;
  out.reserve(cases.size());
  for (const SyntheticCase& c : cases) out.push_back(model.forward(c.features));
  return out;
}

EvalSummary evaluate(const ToySegmenter& model, std::span<const SyntheticCase> cases,
                     const BinConfig& bins, const MetricOptions& options,
                     std::optional<double> temperature) {
  std::vector<ProbabilityMap> probs;
  std::vector<LabelMap> labels;
  probs.reserve(cases.size());
  for (const SyntheticCase& c : cases) {
    const ChannelArray logits = model.forward(c.features);
    probs.push_back(temperature ? apply_temperature(logits, *temperature) : softmax(logits));
    labels.push_back(c.labels);
  }
  EvalSummary out = evaluate_predictions(probs, labels, bins, options);
  out.temperature = temperature;
  return out;
}

TemperatureFit fit_model_temperature(const ToySegmenter& model,
                                     std::span<const SyntheticCase> val_set,
                                     const TemperatureFitOptions& options) {
  const std::vector<ChannelArray> logits = model_logits(model, val_set);
  std::vector<LabelMap> labels;
  for (const SyntheticCase& c : val_set) labels.push_back(c.labels);
  return fit_temperature(logits, labels, options);
}

}  // namespace segcal
