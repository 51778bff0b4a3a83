#include "segcal/seg_losses.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>

#include "segcal/error.hpp"

namespace segcal {

namespace {

void check_pair(const ProbabilityMap& probs, const LabelMap& labels) {
  labels.check_compatible(probs.spatial_shape(), probs.num_classes());
  if (probs.num_voxels() == 0) throw StructuralError("image has no voxels");
}

std::vector<std::size_t> dice_classes(std::size_t classes, const SegLossOptions& options) {
  MetricOptions m;
  m.include_background = options.include_background;
  return averaged_classes(classes, m);
}

}  // namespace

LossOutput ce_loss(const ProbabilityMap& probs, const LabelMap& labels,
                   const SegLossOptions& options) {
  check_pair(probs, labels);
  const std::size_t n = probs.num_voxels();
  const auto inv_n = 1.0 / static_cast<double>(n);
  LossOutput out;
  out.grad_probs = ChannelArray(probs.spatial_shape(), probs.num_classes());

  double total = 0.0;
  if (probs.num_classes() == 1) {
    for (std::size_t i = 0; i < n; ++i) {
      const bool fg = labels[i] == 1;
      const double p_true = std::max(fg ? probs(0, i) : 1.0 - probs(0, i), options.ce_clamp);
      total -= std::log(p_true);
      out.grad_probs(0, i) = (fg ? -inv_n : inv_n) / p_true;
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      const auto c = static_cast<std::size_t>(labels[i]);
      const double p_true = std::max(probs(c, i), options.ce_clamp);
      total -= std::log(p_true);
      out.grad_probs(c, i) = -inv_n / p_true;
    }
  }
  out.value = total * inv_n;
  return out;
}

LogitLossOutput ce_from_logits(const ChannelArray& logits, const LabelMap& labels) {
  const ProbabilityMap probs = softmax(logits);
  check_pair(probs, labels);
  const std::size_t n = probs.num_voxels();
  const std::size_t classes = probs.num_classes();
  const auto inv_n = 1.0 / static_cast<double>(n);

  LogitLossOutput out;
  out.grad_logits = ChannelArray(logits.spatial_shape(), classes);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (classes == 1) {
      // log-sigmoid evaluated without cancellation
      const double z = logits(0, i);
      const double s = labels[i] == 1 ? z : -z;
      total += s >= 0.0 ? std::log1p(std::exp(-s)) : -s + std::log1p(std::exp(s));
      out.grad_logits(0, i) = (probs(0, i) - (labels[i] == 1 ? 1.0 : 0.0)) * inv_n;
      continue;
    }
    double peak = logits(0, i);
    for (std::size_t c = 1; c < classes; ++c) peak = std::max(peak, logits(c, i));
    double norm = 0.0;
    for (std::size_t c = 0; c < classes; ++c) norm += std::exp(logits(c, i) - peak);
    const auto y = static_cast<std::size_t>(labels[i]);
    total += peak + std::log(norm) - logits(y, i);
    for (std::size_t c = 0; c < classes; ++c) {
      out.grad_logits(c, i) = (probs(c, i) - (c == y ? 1.0 : 0.0)) * inv_n;
    }
  }
  out.value = total * inv_n;
  return out;
}

LossOutput soft_dice_loss(const ProbabilityMap& probs, const LabelMap& labels,
                          const SegLossOptions& options) {
  check_pair(probs, labels);
  if (!(options.dice_eps >= 0.0)) {
    throw InputDomainError("dice smoothing must be non-negative");
  }
  const std::size_t n = probs.num_voxels();
  const std::size_t classes = probs.num_classes();
  const auto averaged = dice_classes(classes, options);
  const auto class_weight = 1.0 / static_cast<double>(averaged.size());

  LossOutput out;
  out.grad_probs = ChannelArray(probs.spatial_shape(), classes);
  double total = 0.0;
  for (std::size_t c : averaged) {
    const auto p = probs.channel(c);
    double inter = 0.0, sum_p = 0.0, sum_y = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double y = labels.indicator(c, i, classes) ? 1.0 : 0.0;
      inter += p[i] * y;
      sum_p += p[i];
      sum_y += y;
    }
    const double num = 2.0 * inter + options.dice_eps;
    const double den = sum_p + sum_y + options.dice_eps;
    if (den <= 0.0) {
      throw InputDomainError("soft dice is undefined for class " + std::to_string(c) +
                             " with zero smoothing and an empty channel");
    }
    total += 1.0 - num / den;
    auto g = out.grad_probs.channel(c);
    for (std::size_t i = 0; i < n; ++i) {
      const double y = labels.indicator(c, i, classes) ? 1.0 : 0.0;
      g[i] = -(2.0 * y * den - num) / (den * den) * class_weight;
    }
  }
  out.value = total * class_weight;
  return out;
}

// ---------------------------------------------------------------------------
// LossSpec

const char* loss_term_name(LossTerm term) {
  switch (term) {
    case LossTerm::kCe: return "ce";
    case LossTerm::kDice: return "dice";
    case LossTerm::kAce: return "ace";
    case LossTerm::kEce: return "ece";
    case LossTerm::kMce: return "mce";
  }
  return "?";
}

LossTerm parse_loss_term(std::string_view name) {
  for (LossTerm t : {LossTerm::kCe, LossTerm::kDice, LossTerm::kAce, LossTerm::kEce,
                     LossTerm::kMce}) {
    if (name == loss_term_name(t)) return t;
  }
  throw ConfigError("unknown loss term '" + std::string(name) +
                    "' (expected one of ce, dice, ace, ece, mce)");
}

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

}  // namespace

LossSpec LossSpec::parse(std::string_view text) {
  LossSpec spec;
  while (true) {
    const auto plus = text.find('+');
    const std::string_view item = trim(text.substr(0, plus));
    const auto colon = item.find(':');
    const LossTerm term = parse_loss_term(trim(item.substr(0, colon)));
    double weight = 1.0;
    if (colon != std::string_view::npos) {
      const std::string_view w = trim(item.substr(colon + 1));
      const auto [ptr, ec] = std::from_chars(w.data(), w.data() + w.size(), weight);
      if (ec != std::errc() || ptr != w.data() + w.size()) {
        throw ConfigError("bad weight '" + std::string(w) + "' in loss spec");
      }
    }
    spec.terms.emplace_back(term, weight);
    if (plus == std::string_view::npos) break;
    text.remove_prefix(plus + 1);
  }
  spec.validate();
  return spec;
}

std::string LossSpec::to_string() const {
  std::string out;
  for (const auto& [term, weight] : terms) {
    if (!out.empty()) out += "+";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", weight);
    out += loss_term_name(term);
    out += ":";
    out += buf;
  }
  return out;
}

void LossSpec::validate() const {
  if (terms.empty()) throw ConfigError("loss spec needs at least one term");
  for (const auto& [term, weight] : terms) {
    if (!std::isfinite(weight) || weight < 0.0) {
      throw ConfigError(std::string("weight of loss term '") + loss_term_name(term) +
                        "' must be finite and non-negative");
    }
  }
}

bool LossSpec::contains(LossTerm term) const {
  return std::any_of(terms.begin(), terms.end(),
                     [term](const auto& t) { return t.first == term; });
}

LossOutput combined_loss(const LossSpec& spec, const ProbabilityMap& probs,
                         const LabelMap& labels, const BinConfig& cfg,
                         const CombinedLossOptions& options) {
  spec.validate();
  LossOutput out;
  out.grad_probs = ChannelArray(probs.spatial_shape(), probs.num_classes());
  for (const auto& [term, weight] : spec.terms) {
    LossOutput part;
    switch (term) {
      case LossTerm::kCe: part = ce_loss(probs, labels, options.seg); break;
      case LossTerm::kDice: part = soft_dice_loss(probs, labels, options.seg); break;
      case LossTerm::kAce: part = ace_loss(probs, labels, cfg, options.calibration); break;
      case LossTerm::kEce: part = ece_loss(probs, labels, cfg, options.calibration); break;
      case LossTerm::kMce: part = mce_loss(probs, labels, cfg, options.calibration); break;
    }
    out.value += weight * part.value;
    auto dst = out.grad_probs.values();
    const auto src = part.grad_probs.values();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += weight * src[k];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dice score

std::vector<std::int32_t> hard_prediction(const ProbabilityMap& probs) {
  const std::size_t n = probs.num_voxels();
  std::vector<std::int32_t> pred(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    if (probs.num_classes() == 1) {
      pred[i] = probs(0, i) >= 0.5 ? 1 : 0;
      continue;
    }
    std::size_t best = 0;
    for (std::size_t c = 1; c < probs.num_classes(); ++c) {
      if (probs(c, i) > probs(best, i)) best = c;
    }
    pred[i] = static_cast<std::int32_t>(best);
  }
  return pred;
}

std::vector<double> dice_score(const ProbabilityMap& probs, const LabelMap& labels) {
  check_pair(probs, labels);
  const std::size_t classes = probs.num_classes();
  const auto pred = hard_prediction(probs);
  const LabelMap predicted(probs.spatial_shape(), pred);

  std::vector<double> scores(classes, 1.0);
  for (std::size_t c = 0; c < classes; ++c) {
    std::size_t both = 0, in_pred = 0, in_truth = 0;
    for (std::size_t i = 0; i < probs.num_voxels(); ++i) {
      const bool p = predicted.indicator(c, i, classes);
      const bool g = labels.indicator(c, i, classes);
      both += (p && g) ? 1 : 0;
      in_pred += p ? 1 : 0;
      in_truth += g ? 1 : 0;
    }
    if (in_pred + in_truth > 0) {
      scores[c] = 2.0 * static_cast<double>(both) / static_cast<double>(in_pred + in_truth);
    }
  }
  return scores;
}

}  // namespace segcal
