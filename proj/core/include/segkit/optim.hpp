#pragma once

#include <cstddef>
#include <span>
#include <unordered_map>
#include <vector>

#include "segkit/autograd.hpp"
#include "segkit/layers.hpp"

namespace segkit::optim {

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamSlot {
  std::vector<double> m;
  std::vector<double> v;
};

// One bias-corrected Adam update of `param` in place; t is the 1-based step.
// Throws kShapeMismatch when the gradient shape differs.
void adam_step(Tensor& param, const Tensor& grad, AdamSlot& slot, const AdamConfig& cfg,
               std::size_t t);

// Keeps per-parameter moments keyed by parameter storage. Parameters that do
// not require gradients (frozen) or received none are left untouched.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  void step(std::span<const nn::NamedTensor> params, const Gradients& grads);
  std::size_t steps() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  AdamConfig cfg_;
  std::size_t t_ = 0;
  std::unordered_map<const void*, AdamSlot> slots_;
};

}  // namespace segkit::optim
