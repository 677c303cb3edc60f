#include "segkit/layers.hpp"

#include <cmath>

#include "segkit/error.hpp"

namespace segkit::nn {

Rng::Rng(std::uint64_t seed) : state_(seed) {}

// splitmix64
std::uint64_t Rng::next() {
  std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double Rng::uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

std::size_t Rng::below(std::size_t bound) {
  if (bound <= 1) return 0;
  // Rejection sampling keeps the draw unbiased.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
  std::uint64_t v;
  do {
    v = next();
  } while (v >= limit);
  return static_cast<std::size_t>(v % bound);
}

namespace {

Tensor he_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(std::max<std::size_t>(1, fan_in)));
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.uniform(-bound, bound);
  return Tensor::from_vector(std::move(shape), std::move(v));
}

}  // namespace

std::vector<NamedTensor> Module::named_parameters() {
  std::vector<NamedTensor> out;
  collect("", out);
  return out;
}

std::vector<NamedBuffer> Module::named_buffers() {
  std::vector<NamedBuffer> out;
  collect("", out);
  return out;
}

void Module::collect(const std::string& prefix, std::vector<NamedTensor>& out) {
  for (auto& [name, t] : params_) out.push_back({prefix + name, t.get()});
  for (auto& [name, child] : children_) child->collect(prefix + name + ".", out);
}

void Module::collect(const std::string& prefix, std::vector<NamedBuffer>& out) {
  for (auto& [name, b] : buffers_) out.push_back({prefix + name, b});
  for (auto& [name, child] : children_) child->collect(prefix + name + ".", out);
}

std::size_t Module::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params_) n += t->numel();
  for (const auto& [name, child] : children_) n += child->parameter_count();
  return n;
}

void Module::set_training(bool on) {
  training_ = on;
  for (auto& [name, child] : children_) child->set_training(on);
}

void Module::set_trainable(bool on) {
  for (auto& p : named_parameters()) p.tensor->set_requires_grad(on);
}

bool Module::trainable() const {
  for (const auto& [name, t] : params_)
    if (!t->requires_grad()) return false;
  for (const auto& [name, child] : children_)
    if (!child->trainable()) return false;
  return true;
}

std::size_t Module::conv_layer_count() const {
  std::size_t n = is_convolution() ? 1 : 0;
  for (const auto& [name, child] : children_) n += child->conv_layer_count();
  return n;
}

Tensor& Module::add_parameter(std::string name, Tensor value) {
  value.set_requires_grad(true);
  params_.emplace_back(std::move(name), std::make_unique<Tensor>(std::move(value)));
  return *params_.back().second;
}

void Module::register_buffer(std::string name, std::vector<double>* values) {
  buffers_.emplace_back(std::move(name), values);
}

ConvSpec conv_spec(std::size_t out_channels, std::size_t kernel, std::size_t stride,
                   std::size_t rate) {
  ConvSpec s;
  s.out_channels = out_channels;
  s.kernel_h = kernel;
  s.kernel_w = kernel;
  s.stride = stride;
  s.dilation_rate = rate;
  s.padding = PaddingMode::kSame;
  return s;
}

Conv2d::Conv2d(std::size_t in_channels, const ConvSpec& spec, bool bias, Rng& rng)
    : spec_(spec), in_channels_(in_channels), bias_(nullptr) {
  const std::size_t groups = spec.depthwise ? in_channels : std::max<std::size_t>(1, spec.groups);
  if (in_channels % groups != 0 || spec.out_channels % groups != 0) {
    fail(Errc::kBadSpec, "conv channels not divisible by groups");
  }
  const std::size_t cg = in_channels / groups;
  weight_ = &add_parameter(
      "weight", he_uniform({spec.out_channels, cg, spec.kernel_h, spec.kernel_w},
                           cg * spec.kernel_h * spec.kernel_w, rng));
  if (bias) bias_ = &add_parameter("bias", Tensor::zeros({spec.out_channels}));
}

Tensor Conv2d::forward(const Tensor& x) {
  return conv2d(x, *weight_, bias_ ? *bias_ : no_bias_, spec_);
}

DepthwiseConv2d::DepthwiseConv2d(std::size_t channels, const ConvSpec& spec, Rng& rng)
    : spec_(spec) {
  spec_.out_channels = channels;
  spec_.depthwise = true;
  weight_ = &add_parameter("weight", he_uniform({channels, 1, spec.kernel_h, spec.kernel_w},
                                                 spec.kernel_h * spec.kernel_w, rng));
  bias_ = &add_parameter("bias", Tensor::zeros({channels}));
}

Tensor DepthwiseConv2d::forward(const Tensor& x) {
  return depthwise_conv2d(x, *weight_, *bias_, spec_);
}

ConvTranspose2d::ConvTranspose2d(std::size_t in_channels, std::size_t out_channels,
                                 std::size_t kernel, std::size_t stride, Rng& rng)
    : out_channels_(out_channels), stride_(stride) {
  // Each output pixel sees in_channels * (kernel / stride)^2 taps.
  const std::size_t per_axis = std::max<std::size_t>(1, kernel / std::max<std::size_t>(1, stride));
  weight_ = &add_parameter("weight", he_uniform({in_channels, out_channels, kernel, kernel},
                                                 in_channels * per_axis * per_axis, rng));
  bias_ = &add_parameter("bias", Tensor::zeros({out_channels}));
}

Tensor ConvTranspose2d::forward(const Tensor& x) {
  return transposed_conv2d(x, *weight_, *bias_, stride_);
}

BatchNorm2d::BatchNorm2d(std::size_t channels) : state_(BatchNormState::identity(channels)) {
  gamma_ = &add_parameter("gamma", state_.gamma);
  beta_ = &add_parameter("beta", state_.beta);
  register_buffer("running_mean", &state_.running_mean);
  register_buffer("running_var", &state_.running_var);
}

Tensor BatchNorm2d::forward(const Tensor& x) {
  // Pick up the registered tensors, whose trainable flag may have changed.
  state_.gamma = *gamma_;
  state_.beta = *beta_;
  // A frozen layer also stops tracking batch statistics.
  return batch_norm(x, state_, training() && gamma_->requires_grad());
}

ConvBnAct::ConvBnAct(std::size_t in_channels, const ConvSpec& spec, Rng& rng, Activation act)
    : act_(act) {
  conv_ = add_module("conv", std::make_unique<Conv2d>(in_channels, spec, false, rng));
  bn_ = add_module("bn", std::make_unique<BatchNorm2d>(spec.out_channels));
}

Tensor ConvBnAct::forward(const Tensor& x) {
  return activation(act_, bn_->forward(conv_->forward(x)));
}

}  // namespace segkit::nn
