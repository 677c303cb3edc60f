#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "segkit/tensor.hpp"

// Differentiable tensor primitives.
namespace segkit::ops {

enum class Binary { kAdd, kSub, kMul, kDiv, kMax };

inline constexpr double kDivisionGuard = 1e-12;
inline constexpr double kLogGuard = 1e-12;

// b must match a or broadcast to it: shapes are right-aligned and every b axis
// equals the a axis or is 1. The result has a's shape.
Tensor elementwise(Binary kind, const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
// Natural log of the input clamped to [kLogGuard, 1 - kLogGuard].
Tensor log_clamped(const Tensor& a);
Tensor square(const Tensor& a);

Tensor sum(const Tensor& a);   // -> shape [1], left-to-right
Tensor mean(const Tensor& a);  // -> shape [1]

Tensor matmul(const Tensor& a, const Tensor& b);

Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length);

struct Padding {
  std::size_t top = 0, bottom = 0, left = 0, right = 0;
};
// Pads the last two axes.
Tensor pad(const Tensor& a, Padding padding, double value = 0.0);
Tensor pad(const Tensor& a, std::size_t amount, double value = 0.0);

}  // namespace segkit::ops
