#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "segkit/tensor.hpp"

// Segmentation losses. Targets are constants; gradients flow to predictions.
// Every loss reduces by the mean over elements (or pixels, for the
// categorical ones) and returns a one-element tensor.
namespace segkit::losses {

enum class LossKind { kBce, kCategoricalCe, kDice, kMse, kWeightedCe };

std::string_view to_string(LossKind kind);
// Throws kBadConfig for unknown names.
LossKind parse_loss_kind(std::string_view name);

struct LossSpec {
  LossKind kind = LossKind::kCategoricalCe;
  std::vector<double> class_weights;  // empty = uniform
  double smoothing = 1.0;             // Dice "+1"

  // Throws kBadConfig when weights are non-positive, their count differs from
  // num_classes, or smoothing <= 0.
  void validate(std::size_t num_classes) const;
};

inline constexpr double kProbabilityClamp = 1e-12;
inline constexpr double kNormalizationTolerance = 1e-6;

// mean of -(y log p + (1 - y) log(1 - p)), p clamped to [1e-12, 1 - 1e-12].
Tensor bce_loss(const Tensor& target, const Tensor& predicted);

// Mean over pixels of -sum_c w_c y_c log p_c for N x C x H x W tensors.
// Throws kNotNormalized when a pixel's probabilities do not sum to 1 within
// 1e-6.
Tensor categorical_ce(const Tensor& target_onehot, const Tensor& probabilities,
                      const std::vector<double>& class_weights = {});

// Soft Dice over flattened tensors: 1 - (2 sum(y p) + s) / (sum y + sum p + s).
Tensor dice_loss(const Tensor& target, const Tensor& predicted, double smoothing = 1.0);

Tensor mse_loss(const Tensor& target, const Tensor& predicted);

// Dispatches on spec.kind; target is one-hot, prediction the softmax output.
Tensor compute_loss(const LossSpec& spec, const Tensor& target_onehot,
                    const Tensor& probabilities);

}  // namespace segkit::losses
