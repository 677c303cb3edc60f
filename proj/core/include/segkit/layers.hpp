#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "segkit/nn.hpp"
#include "segkit/tensor.hpp"

namespace segkit::nn {

// Deterministic generator for parameter initialisation. The uniform draw is
// derived from the raw 64-bit output so that values do not depend on the
// standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);
  std::uint64_t next();
  double uniform();  // [0, 1)
  double uniform(double lo, double hi);
  std::size_t below(std::size_t bound);  // [0, bound)

 private:
  std::uint64_t state_;
};

struct NamedTensor {
  std::string name;
  Tensor* tensor;
};

struct NamedBuffer {
  std::string name;
  std::vector<double>* values;
};

// Parameter container with hierarchical names ("stage1.block0.conv.weight").
// Parameters are leaf tensors with requires_grad set while trainable.
class Module {
 public:
  Module() = default;
  virtual ~Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;

  std::vector<NamedTensor> named_parameters();
  std::vector<NamedBuffer> named_buffers();
  std::size_t parameter_count() const;

  void set_training(bool on);
  bool training() const { return training_; }

  // Frozen parameters stop requiring gradients; optimizers skip them.
  void set_trainable(bool on);
  bool trainable() const;

  // Number of convolution layers (standard, depthwise, transposed) in the
  // subtree.
  std::size_t conv_layer_count() const;
  virtual bool is_convolution() const { return false; }

 protected:
  Tensor& add_parameter(std::string name, Tensor value);
  // The buffer must outlive the module (normally a member of it).
  void register_buffer(std::string name, std::vector<double>* values);

  template <class M>
  M* add_module(std::string name, std::unique_ptr<M> child) {
    M* raw = child.get();
    children_.emplace_back(std::move(name), std::move(child));
    return raw;
  }

 private:
  void collect(const std::string& prefix, std::vector<NamedTensor>& out);
  void collect(const std::string& prefix, std::vector<NamedBuffer>& out);

  bool training_ = true;
  std::vector<std::pair<std::string, std::unique_ptr<Tensor>>> params_;
  std::vector<std::pair<std::string, std::vector<double>*>> buffers_;
  std::vector<std::pair<std::string, std::unique_ptr<Module>>> children_;
};

// He-uniform weights, zero bias.
class Conv2d : public Module {
 public:
  Conv2d(std::size_t in_channels, const ConvSpec& spec, bool bias, Rng& rng);

  Tensor forward(const Tensor& x);
  bool is_convolution() const override { return true; }

  ConvSpec& spec() { return spec_; }
  const ConvSpec& spec() const { return spec_; }
  Tensor& weight() { return *weight_; }
  // An undefined tensor when the layer was built without bias.
  Tensor& bias() { return bias_ ? *bias_ : no_bias_; }
  std::size_t in_channels() const { return in_channels_; }

 private:
  ConvSpec spec_;
  std::size_t in_channels_;
  Tensor* weight_;
  Tensor* bias_;
  Tensor no_bias_;
};

class DepthwiseConv2d : public Module {
 public:
  DepthwiseConv2d(std::size_t channels, const ConvSpec& spec, Rng& rng);

  Tensor forward(const Tensor& x);
  bool is_convolution() const override { return true; }
  ConvSpec& spec() { return spec_; }
  Tensor& weight() { return *weight_; }

 private:
  ConvSpec spec_;
  Tensor* weight_;
  Tensor* bias_;
};

class ConvTranspose2d : public Module {
 public:
  ConvTranspose2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                  std::size_t stride, Rng& rng);

  Tensor forward(const Tensor& x);
  bool is_convolution() const override { return true; }
  std::size_t out_channels() const { return out_channels_; }
  Tensor& weight() { return *weight_; }

 private:
  std::size_t out_channels_;
  std::size_t stride_;
  Tensor* weight_;
  Tensor* bias_;
};

class BatchNorm2d : public Module {
 public:
  explicit BatchNorm2d(std::size_t channels);

  Tensor forward(const Tensor& x);
  BatchNormState& state() { return state_; }

 private:
  BatchNormState state_;
  Tensor* gamma_;
  Tensor* beta_;
};

// conv -> batch norm -> activation; the workhorse block of every encoder.
class ConvBnAct : public Module {
 public:
  ConvBnAct(std::size_t in_channels, const ConvSpec& spec, Rng& rng,
            Activation act = Activation::kRelu);

  Tensor forward(const Tensor& x);
  Conv2d& conv() { return *conv_; }
  BatchNorm2d& bn() { return *bn_; }
  std::size_t out_channels() const { return conv_->spec().out_channels; }

 private:
  Conv2d* conv_;
  BatchNorm2d* bn_;
  Activation act_;
};

ConvSpec conv_spec(std::size_t out_channels, std::size_t kernel, std::size_t stride = 1,
                   std::size_t rate = 1);

}  // namespace segkit::nn
