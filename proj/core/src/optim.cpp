#include "segkit/optim.hpp"

#include <cmath>

#include "segkit/error.hpp"

namespace segkit::optim {

void adam_step(Tensor& param, const Tensor& grad, AdamSlot& slot, const AdamConfig& cfg,
               std::size_t t) {
  if (param.shape() != grad.shape()) {
    fail(Errc::kShapeMismatch, "adam: parameter " + shape_str(param.shape()) + " vs gradient " +
                                   shape_str(grad.shape()));
  }
  if (t == 0) fail(Errc::kBadConfig, "adam step counter starts at 1");
  const std::size_t n = param.numel();
  if (slot.m.size() != n) {
    slot.m.assign(n, 0.0);
    slot.v.assign(n, 0.0);
  }
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  auto p = param.mutable_data();
  const auto g = grad.data();
  for (std::size_t i = 0; i < n; ++i) {
    slot.m[i] = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * g[i];
    slot.v[i] = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
    const double m_hat = slot.m[i] / c1;
    const double v_hat = slot.v[i] / c2;
    p[i] -= cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.epsilon);
  }
}

void Adam::step(std::span<const nn::NamedTensor> params, const Gradients& grads) {
  ++t_;
  for (const auto& p : params) {
    if (!p.tensor->requires_grad()) continue;
    const auto g = grads.wrt(*p.tensor);
    if (!g) continue;
    adam_step(*p.tensor, *g, slots_[p.tensor->storage_id()], cfg_, t_);
  }
}

}  // namespace segkit::optim
