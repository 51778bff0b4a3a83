#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "segcal/core.hpp"
#include "segcal/metrics.hpp"
#include "segcal/seg_losses.hpp"
#include "segcal/temp_scale.hpp"

namespace segcal {

// ---------------------------------------------------------------------------
// Synthetic data

struct SyntheticConfig {
  std::size_t min_blobs = 1;
  std::size_t max_blobs = 3;
  // Accepted foreground fraction band; blobs are redrawn until it holds.
  double min_foreground = 0.05;
  double max_foreground = 0.40;
  // Noise on the signed-distance feature.
  double distance_noise = 0.5;
  // Intensity noise away from and at the label edge.
  double intensity_noise = 0.25;
  double boundary_noise = 0.35;
  // Width (pixels) of the soft intensity edge and of the extra-noise band.
  double edge_softness = 1.5;
  double boundary_width = 2.0;
};

inline constexpr std::size_t kSyntheticFeatures = 3;
inline constexpr std::size_t kMinSyntheticSize = 32;

// A 2D image with features (noisy signed distance, noisy soft-edged intensity,
// constant bias) and binary labels from the clean field.
struct SyntheticCase {
  ChannelArray features;  // kSyntheticFeatures channels
  LabelMap labels;
  std::vector<double> signed_distance;  // clean field in pixels, negative inside
  std::uint64_t seed = 0;
};

SyntheticCase generate_synthetic_case(std::uint64_t seed, std::size_t size,
                                      const SyntheticConfig& cfg = {});

std::vector<SyntheticCase> generate_cases(std::uint64_t first_seed, std::size_t count,
                                          std::size_t size, const SyntheticConfig& cfg = {});

// ---------------------------------------------------------------------------
// Model

// Per-voxel MLP: features -> tanh hidden layer -> class logits.
// Parameters are stored flat as [W1 (H x F), b1 (H), W2 (C x H), b2 (C)].
class ToySegmenter {
 public:
  ToySegmenter() = default;
  ToySegmenter(std::size_t features, std::size_t hidden, std::size_t classes);

  static ToySegmenter initialized(std::size_t features, std::size_t hidden,
                                  std::size_t classes, std::uint64_t seed);
  static ToySegmenter from_parameters(std::size_t features, std::size_t hidden,
                                      std::size_t classes, std::vector<double> params);

  std::size_t num_features() const noexcept { return features_; }
  std::size_t hidden_width() const noexcept { return hidden_; }
  std::size_t num_classes() const noexcept { return classes_; }
  std::size_t parameter_count() const noexcept { return params_.size(); }
  std::span<const double> parameters() const noexcept { return params_; }
  std::span<double> parameters() noexcept { return params_; }

  // When `hidden` is given it receives the tanh activations, voxel-major
  // (H per voxel), for reuse by backward.
  ChannelArray forward(const ChannelArray& features,
                       std::vector<double>* hidden = nullptr) const;

  // Accumulates dL/dtheta into `grad` given dL/dlogits for one image.
  // `hidden` is the activation buffer filled by forward, or empty to recompute.
  void backward(const ChannelArray& features, std::span<const double> hidden,
                const ChannelArray& grad_logits, std::span<double> grad) const;

  bool operator==(const ToySegmenter&) const = default;

 private:
  void check_features(const ChannelArray& features) const;

  std::size_t features_ = 0;
  std::size_t hidden_ = 0;
  std::size_t classes_ = 0;
  std::vector<double> params_;
};

struct ModelLoss {
  double value = 0.0;             // mean over cases
  std::vector<double> gradient;   // d value / d theta
};

// Composite loss of the model over a set of cases, chained
// loss -> softmax -> model. Cases are reduced in order.
ModelLoss model_loss(const ToySegmenter& model, std::span<const SyntheticCase> cases,
                     const LossSpec& spec, const BinConfig& bins,
                     const CombinedLossOptions& options = {});

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  LossSpec loss = LossSpec::parse("dice");
  CombinedLossOptions loss_options;
  BinConfig bins;
  int epochs = 300;
  double learning_rate = 1e-2;
  double momentum = 0.9;
  std::size_t hidden = 16;
  std::size_t image_size = 48;
  std::size_t train_cases = 16;
  std::size_t val_cases = 8;
  std::size_t test_cases = 16;
  std::uint64_t data_seed = 1;
  std::uint64_t init_seed = 1;
  SyntheticConfig data;

  void validate() const;
};

struct DatasetSplit {
  std::vector<SyntheticCase> train;
  std::vector<SyntheticCase> val;
  std::vector<SyntheticCase> test;
};

// Disjoint seed ranges derived from data_seed.
DatasetSplit make_split(const TrainConfig& cfg);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_dice = 0.0;
  double val_ace = 0.0;

  bool operator==(const EpochRecord&) const = default;
};

struct TrainResult {
  ToySegmenter model;  // weights with the best validation Dice
  std::vector<EpochRecord> history;
  int best_epoch = -1;
};

// Full-batch gradient descent with momentum. Throws TrainingError when the
// loss turns non-finite.
TrainResult train(const TrainConfig& cfg, std::span<const SyntheticCase> train_set,
                  std::span<const SyntheticCase> val_set);

std::string history_csv(std::span<const EpochRecord> history);

// ---------------------------------------------------------------------------
// Evaluation

struct CaseMetrics {
  double dice = 0.0;  // mean over foreground classes
  double ace = 0.0;
  double ece = 0.0;
  double mce = 0.0;
};

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
};

struct EvalSummary {
  std::vector<CaseMetrics> cases;
  MeanStd dice, ace, ece, mce;
  std::optional<double> temperature;
};

EvalSummary evaluate_predictions(std::span<const ProbabilityMap> probs,
                                 std::span<const LabelMap> labels, const BinConfig& bins,
                                 const MetricOptions& options = {});

EvalSummary evaluate(const ToySegmenter& model, std::span<const SyntheticCase> cases,
                     const BinConfig& bins, const MetricOptions& options = {},
                     std::optional<double> temperature = std::nullopt);

// Fits a temperature on the model's logits over `val_set` by minimising CE.
TemperatureFit fit_model_temperature(const ToySegmenter& model,
                                     std::span<const SyntheticCase> val_set,
                                     const TemperatureFitOptions& options = {});

std::vector<ChannelArray> model_logits(const ToySegmenter& model,
                                       std::span<const SyntheticCase> cases);

}  // namespace segcal
