#include "segkit/backbones.hpp"

#include <algorithm>
#include <cmath>

#include "segkit/error.hpp"
#include "segkit/ops.hpp"

namespace segkit::models {

using nn::Activation;
using nn::ConvBnAct;
using nn::conv_spec;
using nn::Rng;

std::string_view to_string(Family family) {
  switch (family) {
    case Family::kVgg: return "vgg";
    case Family::kResnet: return "resnet";
    case Family::kDensenet: return "densenet";
    case Family::kInception: return "inception";
    case Family::kMobilenet: return "mobilenet";
    case Family::kEfficientnet: return "efficientnet";
  }
  return "resnet";
}

Family parse_family(std::string_view name) {
  for (Family f : kAllFamilies)
    if (to_string(f) == name) return f;
  fail(Errc::kBadSpec, "unknown backbone family '" + std::string(name) + "'");
}

ScaleMultipliers compound_scale(double phi, double alpha, double beta, double gamma) {
  if (!(alpha >= 1.0 && beta >= 1.0 && gamma >= 1.0)) {
    fail(Errc::kBadCoefficients, "compound coefficients must be >= 1");
  }
  if (!(phi >= 0.0)) fail(Errc::kBadCoefficients, "compound phi must be >= 0");
  const double flops = alpha * beta * beta * gamma * gamma;
  if (std::abs(flops - 2.0) / 2.0 > 0.05) {
    fail(Errc::kBadCoefficients,
         "alpha * beta^2 * gamma^2 = " + std::to_string(flops) + ", expected ~2");
  }
  return {std::pow(alpha, phi), std::pow(beta, phi), std::pow(gamma, phi)};
}

std::size_t scale_depth(std::size_t depth, double multiplier) {
  // Guard against 2.0000000000000004-style overshoot before rounding up.
  const double scaled = static_cast<double>(depth) * multiplier;
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(scaled - 1e-9)));
}

std::size_t round_width(double width) {
  const auto rounded = static_cast<std::size_t>(std::llround(width / 8.0)) * 8;
  return std::max<std::size_t>(8, rounded);
}

void BackboneSpec::validate() const {
  if (base_width == 0) fail(Errc::kBadSpec, "base_width must be positive");
  if (depth_per_stage.size() != 4) fail(Errc::kBadSpec, "depth_per_stage needs 4 entries");
  for (auto d : depth_per_stage)
    if (d == 0) fail(Errc::kBadSpec, "stage depths must be positive");
  if (family == Family::kEfficientnet) {
    compound_scale(compound_phi, coefficients.alpha, coefficients.beta, coefficients.gamma);
  }
}

const Tensor& FeaturePyramid::at_stride(std::size_t stride) const {
  for (std::size_t i = kPyramidLevels; i-- > 0;)
    if (strides[i] == stride) return levels[i];
  fail(Errc::kBadSpec, "no pyramid level at stride " + std::to_string(stride));
}

void require_divisible(const Tensor& x) {
  if (x.rank() != 4) fail(Errc::kShapeMismatch, "expected N x C x H x W, got " + shape_str(x.shape()));
  if (x.dim(2) % 32 != 0 || x.dim(3) % 32 != 0) {
    fail(Errc::kInputNotDivisible,
         "input " + std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)) +
             " is not divisible by 32");
  }
}

// ---------------------------------------------------------------------------
// Blocks

ResidualBlock::ResidualBlock(std::size_t in, std::size_t out, std::size_t stride, Rng& rng) {
  first_ = add_module("conv1", std::make_unique<ConvBnAct>(in, conv_spec(out, 3, stride), rng));
  second_ = add_module("conv2", std::make_unique<ConvBnAct>(out, conv_spec(out, 3), rng,
                                                            Activation::kIdentity));
  if (stride != 1 || in != out) {
    projection_ = add_module("shortcut", std::make_unique<ConvBnAct>(
                                             in, conv_spec(out, 1, stride), rng,
                                             Activation::kIdentity));
  }
}

Tensor ResidualBlock::shortcut(const Tensor& x) {
  return projection_ ? projection_->forward(x) : x;
}

Tensor ResidualBlock::forward(const Tensor& x) {
  return nn::relu(ops::add(second_->forward(first_->forward(x)), shortcut(x)));
}

void ResidualBlock::configure(std::size_t stride, std::size_t rate) {
  first_->conv().spec().stride = stride;
  first_->conv().spec().dilation_rate = rate;
  second_->conv().spec().dilation_rate = rate;
  if (projection_) projection_->conv().spec().stride = stride;
}

namespace {

// Depthwise 3x3 -> BN -> ReLU, the spatial half of a separable block.
class DepthwiseBnRelu : public nn::Module {
 public:
  DepthwiseBnRelu(std::size_t channels, std::size_t stride, Rng& rng) {
    dw_ = add_module("dw", std::make_unique<nn::DepthwiseConv2d>(channels, conv_spec(channels, 3, stride), rng));
    bn_ = add_module("bn", std::make_unique<nn::BatchNorm2d>(channels));
  }
  Tensor forward(const Tensor& x) { return nn::relu(bn_->forward(dw_->forward(x))); }
  void configure(std::size_t stride, std::size_t rate) {
    dw_->spec().stride = stride;
    dw_->spec().dilation_rate = rate;
  }

 private:
  nn::DepthwiseConv2d* dw_;
  nn::BatchNorm2d* bn_;
};

// Plain stacks of 3x3 conv-BN-ReLU. The stem pools after its convolutions,
// later stages pool first.
class VggStage : public Stage {
 public:
  VggStage(std::size_t in, std::size_t out, std::size_t depth, bool pool_after, Rng& rng)
      : out_(out), pool_after_(pool_after) {
    for (std::size_t i = 0; i < depth; ++i) {
      convs_.push_back(add_module("conv" + std::to_string(i),
                                  std::make_unique<ConvBnAct>(i == 0 ? in : out, conv_spec(out, 3), rng)));
    }
  }
  Tensor forward(const Tensor& x) override {
    Tensor y = x;
    if (!pool_after_ && pooling_) y = nn::pool2d(nn::PoolKind::kMax, y, 2, 2);
    for (auto* c : convs_) y = c->forward(y);
    if (pool_after_) y = nn::pool2d(nn::PoolKind::kMax, y, 2, 2);
    return y;
  }
  void configure(std::size_t stride, std::size_t rate) override {
    pooling_ = stride == 2;
    for (auto* c : convs_) c->conv().spec().dilation_rate = rate;
  }
  std::size_t out_channels() const override { return out_; }

 private:
  std::size_t out_;
  bool pool_after_;
  bool pooling_ = true;
  std::vector<ConvBnAct*> convs_;
};

class SingleConvStem : public Stage {
 public:
  SingleConvStem(std::size_t in, std::size_t out, std::size_t kernel, Rng& rng) : out_(out) {
    conv_ = add_module("conv", std::make_unique<ConvBnAct>(in, conv_spec(out, kernel, 2), rng));
  }
  Tensor forward(const Tensor& x) override { return conv_->forward(x); }
  void configure(std::size_t, std::size_t) override {}
  std::size_t out_channels() const override { return out_; }

 private:
  std::size_t out_;
  ConvBnAct* conv_;
};

class ResnetStage : public Stage {
 public:
  // The first stage downsamples with a 3x3/2 max pool, later ones with a
  // strided first block.
  ResnetStage(std::size_t in, std::size_t out, std::size_t depth, bool pool_first, Rng& rng)
      : out_(out), pool_first_(pool_first) {
    for (std::size_t i = 0; i < depth; ++i) {
      const std::size_t stride = (i == 0 && !pool_first) ? 2 : 1;
      blocks_.push_back(add_module("block" + std::to_string(i),
                                   std::make_unique<ResidualBlock>(i == 0 ? in : out, out, stride, rng)));
    }
  }
  Tensor forward(const Tensor& x) override {
    Tensor y = x;
    if (pool_first_) y = nn::pool2d(nn::PoolKind::kMax, y, nn::PoolSpec{3, 2, nn::PaddingMode::kSame});
    for (auto* b : blocks_) y = b->forward(y);
    return y;
  }
  void configure(std::size_t stride, std::size_t rate) override {
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const std::size_t s = (i == 0 && !pool_first_) ? stride : 1;
      blocks_[i]->configure(s, rate);
    }
  }
  std::size_t out_channels() const override { return out_; }

 private:
  std::size_t out_;
  bool pool_first_;
  std::vector<ResidualBlock*> blocks_;
};

// Each layer sees the concatenation of all previous outputs and adds
// `growth` channels.
class DenseStage : public Stage {
 public:
  DenseStage(std::size_t in, std::size_t growth, std::size_t depth, Rng& rng)
      : out_(in + growth * depth) {
    for (std::size_t i = 0; i < depth; ++i) {
      layers_.push_back(add_module("layer" + std::to_string(i),
                                   std::make_unique<ConvBnAct>(in + i * growth, conv_spec(growth, 3), rng)));
    }
  }
  Tensor forward(const Tensor& x) override {
    Tensor y = pooling_ ? nn::pool2d(nn::PoolKind::kAverage, x, 2, 2) : x;
    for (auto* layer : layers_) {
      const Tensor parts[] = {y, layer->forward(y)};
      y = ops::concat(parts, 1);
    }
    return y;
  }
  void configure(std::size_t stride, std::size_t rate) override {
    pooling_ = stride == 2;
    for (auto* l : layers_) l->conv().spec().dilation_rate = rate;
  }
  std::size_t out_channels() const override { return out_; }

 private:
  std::size_t out_;
  bool pooling_ = true;
  std::vector<ConvBnAct*> layers_;
};

// Two parallel branches: 3x3 conv to c/2 and 3x3 average pool + 1x1 conv to
// the rest, concatenated.
class InceptionBlock : public nn::Module {
 public:
  InceptionBlock(std::size_t channels, Rng& rng) {
    const std::size_t half = channels / 2;
    conv3_ = add_module("branch3x3", std::make_unique<ConvBnAct>(channels, conv_spec(half, 3), rng));
    pool1_ = add_module("branch_pool", std::make_unique<ConvBnAct>(channels, conv_spec(channels - half, 1), rng));
  }
  Tensor forward(const Tensor& x) {
    const Tensor pooled = nn::pool2d(nn::PoolKind::kAverage, x, nn::PoolSpec{3, 1, nn::PaddingMode::kSame});
    const Tensor parts[] = {conv3_->forward(x), pool1_->forward(pooled)};
    return ops::concat(parts, 1);
  }
  void set_rate(std::size_t rate) { conv3_->conv().spec().dilation_rate = rate; }

 private:
  ConvBnAct* conv3_;
  ConvBnAct* pool1_;
};

class InceptionStage : public Stage {
 public:
  InceptionStage(std::size_t in, std::size_t out, std::size_t depth, Rng& rng) : out_(out) {
    entry_ = add_module("entry", std::make_unique<ConvBnAct>(in, conv_spec(out, 3, 2), rng));
    for (std::size_t i = 0; i < depth; ++i) {
      blocks_.push_back(add_module("block" + std::to_string(i), std::make_unique<InceptionBlock>(out, rng)));
    }
  }
  Tensor forward(const Tensor& x) override {
    Tensor y = entry_->forward(x);
    for (auto* b : blocks_) y = b->forward(y);
    return y;
  }
  void configure(std::size_t stride, std::size_t rate) override {
    entry_->conv().spec().stride = stride;
    entry_->conv().spec().dilation_rate = rate;
    for (auto* b : blocks_) b->set_rate(rate);
  }
  std::size_t out_channels() const override { return out_; }

 private:
  std::size_t out_;
  ConvBnAct* entry_;
  std::vector<InceptionBlock*> blocks_;
};

// Depthwise-separable: depthwise 3x3 then pointwise 1x1.
class SeparableBlock : public nn::Module {
 public:
  SeparableBlock(std::size_t in, std::size_t out, std::size_t stride, Rng& rng) : stride_(stride) {
    depthwise_ = add_module("depthwise", std::make_unique<DepthwiseBnRelu>(in, stride, rng));
    pointwise_ = add_module("pointwise", std::make_unique<ConvBnAct>(in, conv_spec(out, 1), rng));
  }
  Tensor forward(const Tensor& x, bool pointwise) {
    Tensor y = depthwise_->forward(x);
    return pointwise ? pointwise_->forward(y) : y;
  }
  void configure(std::size_t stride, std::size_t rate) { depthwise_->configure(stride, rate); }
  std::size_t stride() const { return stride_; }

 private:
  std::size_t stride_;
  DepthwiseBnRelu* depthwise_;
  ConvBnAct* pointwise_;
};

class MobileStage : public Stage {
 public:
  MobileStage(std::size_t in, std::size_t out, std::size_t depth, Rng& rng) : in_(in), out_(out) {
    for (std::size_t i = 0; i < depth; ++i) {
      blocks_.push_back(add_module("block" + std::to_string(i),
                                   std::make_unique<SeparableBlock>(i == 0 ? in : out, out, i == 0 ? 2 : 1, rng)));
    }
  }
  Tensor forward(const Tensor& x) override {
    Tensor y = x;
    for (auto* b : blocks_) y = b->forward(y, pointwise_);
    return y;
  }
  void configure(std::size_t stride, std::size_t rate) override {
    for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i]->configure(i == 0 ? stride : 1, rate);
  }
  std::size_t out_channels() const override { return out_; }
  bool set_pointwise_enabled(bool on) override {
    // Later blocks are built for `out` channels.
    if (in_ != out_ && blocks_.size() > 1) return false;
    pointwise_ = on;
    return true;
  }

 private:
  std::size_t in_, out_;
  bool pointwise_ = true;
  std::vector<SeparableBlock*> blocks_;
};

// MBConv without squeeze-excite: 1x1 expand -> depthwise 3x3 -> 1x1 project,
// residual when the shape is preserved. Expansion 1 skips the expand conv.
class MbConvBlock : public nn::Module {
 public:
  MbConvBlock(std::size_t in, std::size_t out, std::size_t stride, std::size_t expansion, Rng& rng)
      : in_(in), out_(out), stride_(stride) {
    const std::size_t mid = in * expansion;
    if (expansion > 1) {
      expand_ = add_module("expand", std::make_unique<ConvBnAct>(in, conv_spec(mid, 1), rng));
    }
    depthwise_ = add_module("depthwise", std::make_unique<DepthwiseBnRelu>(mid, stride, rng));
    project_ = add_module("project", std::make_unique<ConvBnAct>(mid, conv_spec(out, 1), rng,
                                                                 Activation::kIdentity));
  }
  Tensor forward(const Tensor& x, bool pointwise) {
    Tensor y = x;
    if (pointwise && expand_) y = expand_->forward(y);
    y = depthwise_->forward(y);
    if (pointwise) y = project_->forward(y);
    if (stride_ == 1 && y.shape() == x.shape()) y = ops::add(y, x);
    return y;
  }
  void configure(std::size_t stride, std::size_t rate) {
    stride_ = stride;
    depthwise_->configure(stride, rate);
  }
  bool expands() const { return expand_ != nullptr; }

 private:
  std::size_t in_, out_, stride_;
  ConvBnAct* expand_ = nullptr;
  DepthwiseBnRelu* depthwise_;
  ConvBnAct* project_;
};

class MbConvStage : public Stage {
 public:
  MbConvStage(std::size_t in, std::size_t out, std::size_t depth, std::size_t expansion, Rng& rng)
      : in_(in), out_(out) {
    for (std::size_t i = 0; i < depth; ++i) {
      blocks_.push_back(add_module("block" + std::to_string(i),
                                   std::make_unique<MbConvBlock>(i == 0 ? in : out, out, i == 0 ? 2 : 1,
                                                                 expansion, rng)));
    }
  }
  Tensor forward(const Tensor& x) override {
    Tensor y = x;
    for (auto* b : blocks_) y = b->forward(y, pointwise_);
    return y;
  }
  void configure(std::size_t stride, std::size_t rate) override {
    for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i]->configure(i == 0 ? stride : 1, rate);
  }
  std::size_t out_channels() const override { return out_; }
  bool set_pointwise_enabled(bool on) override {
    // Without the expand conv the depthwise width would not match the input.
    for (auto* b : blocks_)
      if (b->expands()) return false;
    if (in_ != out_ && blocks_.size() > 1) return false;
    pointwise_ = on;
    return true;
  }

 private:
  std::size_t in_, out_;
  bool pointwise_ = true;
  std::vector<MbConvBlock*> blocks_;
};

constexpr std::size_t kMbConvExpansion = 4;

}  // namespace

std::unique_ptr<Stage> make_stage(Family family, std::size_t level, std::size_t in,
                                  std::size_t out, std::size_t depth, Rng& rng) {
  if (level == 0) {
    switch (family) {
      case Family::kVgg: return std::make_unique<VggStage>(in, out, 2, true, rng);
      case Family::kResnet: return std::make_unique<SingleConvStem>(in, out, 7, rng);
      default: return std::make_unique<SingleConvStem>(in, out, 3, rng);
    }
  }
  switch (family) {
    case Family::kVgg: return std::make_unique<VggStage>(in, out, depth, false, rng);
    case Family::kResnet: return std::make_unique<ResnetStage>(in, out, depth, level == 1, rng);
    case Family::kDensenet: {
      if (out <= in || (out - in) % depth != 0) fail(Errc::kBadSpec, "dense stage widths");
      return std::make_unique<DenseStage>(in, (out - in) / depth, depth, rng);
    }
    case Family::kInception: return std::make_unique<InceptionStage>(in, out, depth, rng);
    case Family::kMobilenet: return std::make_unique<MobileStage>(in, out, depth, rng);
    case Family::kEfficientnet:
      // The first stage uses expansion 1, as in the reference design.
      return std::make_unique<MbConvStage>(in, out, depth, level == 1 ? 1 : kMbConvExpansion, rng);
  }
  fail(Errc::kBadSpec, "unknown family");
}

Encoder::Encoder(const BackboneSpec& spec, std::uint64_t seed) : spec_(spec) {
  spec_.validate();
  const bool efficient = spec_.family == Family::kEfficientnet;
  if (efficient) {
    multipliers_ = compound_scale(spec_.compound_phi, spec_.coefficients.alpha,
                                  spec_.coefficients.beta, spec_.coefficients.gamma);
  }
  for (auto d : spec_.depth_per_stage) depths_.push_back(efficient ? scale_depth(d, multipliers_.depth) : d);

  const std::size_t w = spec_.base_width;
  if (spec_.family == Family::kDensenet) {
    const std::size_t growth = std::max<std::size_t>(4, w / 2);
    channels_.push_back(w);
    for (std::size_t i = 0; i < 4; ++i) channels_.push_back(channels_.back() + growth * depths_[i]);
  } else {
    for (std::size_t i = 0; i < kPyramidLevels; ++i) {
      const double width = static_cast<double>(w << i);
      channels_.push_back(efficient ? round_width(width * multipliers_.width) : w << i);
    }
  }

  Rng rng(seed);
  for (std::size_t level = 0; level < kPyramidLevels; ++level) {
    const std::size_t in = level == 0 ? 3 : channels_[level - 1];
    const std::size_t depth = level == 0 ? 1 : depths_[level - 1];
    auto stage = make_stage(spec_.family, level, in, channels_[level], depth, rng);
    stages_.push_back(add_module(level == 0 ? std::string("stem") : "stage" + std::to_string(level),
                                 std::move(stage)));
  }
}

void Encoder::set_output_stride(std::size_t os) {
  if (os != 8 && os != 16 && os != 32) fail(Errc::kBadConfig, "output stride must be 8, 16 or 32");
  output_stride_ = os;
  // Stage levels 1..4 nominally reach stride 4, 8, 16, 32.
  std::size_t stride = 2, rate = 1;
  for (std::size_t level = 1; level < kPyramidLevels; ++level) {
    if (stride * 2 <= os) {
      stride *= 2;
      stages_[level]->configure(2, 1);
    } else {
      rate *= 2;
      stages_[level]->configure(1, rate);
    }
  }
}

FeaturePyramid Encoder::forward(const Tensor& x) {
  require_divisible(x);
  if (x.dim(1) != 3) fail(Errc::kShapeMismatch, "encoder expects 3 input channels");
  FeaturePyramid out;
  Tensor y = x;
  std::size_t stride = 1;
  for (std::size_t level = 0; level < kPyramidLevels; ++level) {
    y = stages_[level]->forward(y);
    stride = x.dim(2) / y.dim(2);
    out.levels[level] = y;
    out.strides[level] = stride;
  }
  return out;
}

std::unique_ptr<Encoder> build_backbone(const BackboneSpec& spec, std::uint64_t seed) {
  return std::make_unique<Encoder>(spec, seed);
}

}  // namespace segkit::models
