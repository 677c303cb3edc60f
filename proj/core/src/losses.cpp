#include "segkit/losses.hpp"

#include <algorithm>
#include <cmath>

#include "segkit/autograd.hpp"
#include "segkit/error.hpp"

namespace segkit::losses {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    fail(Errc::kShapeMismatch,
         std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

double clamp_probability(double p) {
  return std::clamp(p, kProbabilityClamp, 1.0 - kProbabilityClamp);
}

bool inside_clamp(double p) { return p >= kProbabilityClamp && p <= 1.0 - kProbabilityClamp; }

}  // namespace

std::string_view to_string(LossKind kind) {
  switch (kind) {
    case LossKind::kBce: return "bce";
    case LossKind::kCategoricalCe: return "categorical_ce";
    case LossKind::kDice: return "dice";
    case LossKind::kMse: return "mse";
    case LossKind::kWeightedCe: return "weighted_ce";
  }
  return "categorical_ce";
}

LossKind parse_loss_kind(std::string_view name) {
  for (LossKind k : {LossKind::kBce, LossKind::kCategoricalCe, LossKind::kDice, LossKind::kMse,
                     LossKind::kWeightedCe}) {
    if (to_string(k) == name) return k;
  }
  if (name == "categorical_crossentropy") return LossKind::kCategoricalCe;
  fail(Errc::kBadConfig, "unknown loss '" + std::string(name) + "'");
}

void LossSpec::validate(std::size_t num_classes) const {
  if (!(smoothing > 0.0)) fail(Errc::kBadConfig, "dice smoothing must be > 0");
  if (!class_weights.empty()) {
    if (class_weights.size() != num_classes) {
      fail(Errc::kBadConfig, "class_weights has " + std::to_string(class_weights.size()) +
                                 " entries for " + std::to_string(num_classes) + " classes");
    }
    for (double w : class_weights)
      if (!(w > 0.0)) fail(Errc::kBadConfig, "class weights must be positive");
  }
  if (kind == LossKind::kWeightedCe && class_weights.empty()) {
    fail(Errc::kBadConfig, "weighted_ce needs class_weights");
  }
}

Tensor bce_loss(const Tensor& target, const Tensor& predicted) {
  require_same_shape(target, predicted, "bce_loss");
  const auto y = target.data();
  const auto p = predicted.data();
  const double n = static_cast<double>(p.size());
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = clamp_probability(p[i]);
    total += -(y[i] * std::log(q) + (1.0 - y[i]) * std::log(1.0 - q));
  }
  Tensor result = Tensor::scalar(total / n);
  Tensor sy = target.detach();
  Tensor sp = predicted.detach();
  return autograd::record(
      "bce_loss", std::move(result), {nullptr, &predicted},
      [sy, sp, n](std::span<const double> g, std::span<std::vector<double>*> gi) {
        auto& gp = *gi[1];
        const auto y = sy.data();
        const auto p = sp.data();
        for (std::size_t i = 0; i < p.size(); ++i) {
          if (!inside_clamp(p[i])) continue;
          gp[i] += g[0] * (-(y[i] / p[i]) + (1.0 - y[i]) / (1.0 - p[i])) / n;
        }
      });
}

Tensor categorical_ce(const Tensor& target_onehot, const Tensor& probabilities,
                      const std::vector<double>& class_weights) {
  require_same_shape(target_onehot, probabilities, "categorical_ce");
  if (probabilities.rank() != 4) {
    fail(Errc::kShapeMismatch, "categorical_ce expects N x C x H x W");
  }
  const std::size_t n = probabilities.dim(0), c = probabilities.dim(1);
  const std::size_t plane = probabilities.dim(2) * probabilities.dim(3);
  if (!class_weights.empty() && class_weights.size() != c) {
    fail(Errc::kShapeMismatch, "class weight count differs from channel count");
  }
  auto weight = [&class_weights](std::size_t k) {
    return class_weights.empty() ? 1.0 : class_weights[k];
  };
  const auto y = target_onehot.data();
  const auto p = probabilities.data();
  double total = 0.0;
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t q = 0; q < plane; ++q) {
      const std::size_t base = b * c * plane + q;
      double s = 0.0;
      for (std::size_t k = 0; k < c; ++k) s += p[base + k * plane];
      if (std::abs(s - 1.0) > kNormalizationTolerance) {
        fail(Errc::kNotNormalized, "pixel probabilities sum to " + std::to_string(s));
      }
      for (std::size_t k = 0; k < c; ++k) {
        const std::size_t i = base + k * plane;
        if (y[i] != 0.0) total -= weight(k) * y[i] * std::log(clamp_probability(p[i]));
      }
    }
  const double pixels = static_cast<double>(n * plane);
  Tensor result = Tensor::scalar(total / pixels);
  Tensor sy = target_onehot.detach();
  Tensor sp = probabilities.detach();
  return autograd::record(
      "categorical_ce", std::move(result), {nullptr, &probabilities},
      [sy, sp, c, plane, pixels, class_weights](std::span<const double> g,
                                                std::span<std::vector<double>*> gi) {
        auto& gp = *gi[1];
        const auto y = sy.data();
        const auto p = sp.data();
        for (std::size_t i = 0; i < p.size(); ++i) {
          if (y[i] == 0.0 || !inside_clamp(p[i])) continue;
          const std::size_t k = (i / plane) % c;
          const double w = class_weights.empty() ? 1.0 : class_weights[k];
          gp[i] += -g[0] * w * y[i] / p[i] / pixels;
        }
      });
}

Tensor dice_loss(const Tensor& target, const Tensor& predicted, double smoothing) {
  if (target.numel() != predicted.numel()) {
    fail(Errc::kShapeMismatch, "dice_loss: " + shape_str(target.shape()) + " vs " +
                                   shape_str(predicted.shape()));
  }
  const auto y = target.data();
  const auto p = predicted.data();
  double inter = 0.0, sy = 0.0, sp = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += y[i] * p[i];
    sy += y[i];
    sp += p[i];
  }
  const double num = 2.0 * inter + smoothing;
  const double den = sy + sp + smoothing;
  Tensor result = Tensor::scalar(1.0 - num / den);
  Tensor ty = target.detach();
  return autograd::record(
      "dice_loss", std::move(result), {nullptr, &predicted},
      [ty, num, den](std::span<const double> g, std::span<std::vector<double>*> gi) {
        auto& gp = *gi[1];
        const auto y = ty.data();
        // d/dp_i of -(num/den) = -(2 y_i den - num) / den^2
        for (std::size_t i = 0; i < y.size(); ++i) {
          gp[i] += -g[0] * (2.0 * y[i] * den - num) / (den * den);
        }
      });
}

Tensor mse_loss(const Tensor& target, const Tensor& predicted) {
  require_same_shape(target, predicted, "mse_loss");
  const auto y = target.data();
  const auto p = predicted.data();
  const double n = static_cast<double>(p.size());
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = y[i] - p[i];
    total += d * d;
  }
  Tensor result = Tensor::scalar(total / n);
  Tensor sy = target.detach();
  Tensor sp = predicted.detach();
  return autograd::record(
      "mse_loss", std::move(result), {nullptr, &predicted},
      [sy, sp, n](std::span<const double> g, std::span<std::vector<double>*> gi) {
        auto& gp = *gi[1];
        const auto y = sy.data();
        const auto p = sp.data();
        for (std::size_t i = 0; i < p.size(); ++i) gp[i] += g[0] * 2.0 * (p[i] - y[i]) / n;
      });
}

Tensor compute_loss(const LossSpec& spec, const Tensor& target_onehot,
                    const Tensor& probabilities) {
  switch (spec.kind) {
    case LossKind::kBce: return bce_loss(target_onehot, probabilities);
    case LossKind::kCategoricalCe:
      return categorical_ce(target_onehot, probabilities, spec.class_weights);
    case LossKind::kWeightedCe:
      return categorical_ce(target_onehot, probabilities, spec.class_weights);
    case LossKind::kDice: return dice_loss(target_onehot, probabilities, spec.smoothing);
    case LossKind::kMse: return mse_loss(target_onehot, probabilities);
  }
  return categorical_ce(target_onehot, probabilities);
}

}  // namespace segkit::losses
