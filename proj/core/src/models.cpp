#include "segkit/models.hpp"

#include <algorithm>
#include <set>

#include "segkit/error.hpp"
#include "segkit/ops.hpp"

namespace segkit::models {

using nn::Activation;
using nn::ConvBnAct;
using nn::conv_spec;

std::string_view to_string(Architecture arch) {
  switch (arch) {
    case Architecture::kUnet: return "unet";
    case Architecture::kFpn: return "fpn";
    case Architecture::kLinknet: return "linknet";
    case Architecture::kPspnet: return "pspnet";
    case Architecture::kDeeplabv3plus: return "deeplabv3plus";
  }
  return "unet";
}

Architecture parse_architecture(std::string_view name) {
  for (Architecture a : kAllArchitectures)
    if (to_string(a) == name) return a;
  fail(Errc::kBadConfig, "unknown architecture '" + std::string(name) + "'");
}

void ModelConfig::validate() const {
  if (num_classes < 2) fail(Errc::kBadConfig, "num_classes must be >= 2");
  if (decoder_width == 0) fail(Errc::kBadConfig, "decoder_width must be positive");
  if (output_stride != 8 && output_stride != 16) fail(Errc::kBadConfig, "output_stride must be 8 or 16");
  if (pyramid_bins.empty()) fail(Errc::kBadConfig, "pyramid_bins is empty");
  for (std::size_t i = 0; i < pyramid_bins.size(); ++i) {
    if (pyramid_bins[i] == 0 || (i > 0 && pyramid_bins[i] <= pyramid_bins[i - 1])) {
      fail(Errc::kBadConfig, "pyramid_bins must be positive and strictly increasing");
    }
  }
  std::set<std::size_t> seen;
  for (auto r : atrous_rates) {
    if (r == 0 || !seen.insert(r).second) fail(Errc::kBadConfig, "atrous_rates must be positive and distinct");
  }
  backbone.validate();
}

std::vector<std::size_t> ModelConfig::effective_atrous_rates() const {
  if (!atrous_rates.empty()) return atrous_rates;
  if (output_stride == 8) return {3, 6, 9};
  return {6, 12, 18};
}

SegmentationModel::SegmentationModel(const ModelConfig& config, std::uint64_t seed)
    : config_(config), rng_(seed ^ 0x5bd1e995ULL) {
  config_.validate();
  encoder_ = add_module("encoder", build_backbone(config_.backbone, seed));
}

Tensor SegmentationModel::forward(const Tensor& images) {
  require_divisible(images);
  const FeaturePyramid pyramid = encoder_->forward(images);
  Tensor logits = decode(pyramid, images.dim(2), images.dim(3));
  if (logits.dim(2) != images.dim(2) || logits.dim(3) != images.dim(3)) {
    fail(Errc::kShapeMismatch, "decoder produced " + shape_str(logits.shape()));
  }
  return logits;
}

SegmentationModel::Prediction SegmentationModel::predict(const Tensor& images) {
  Prediction p;
  p.probabilities = nn::softmax_channel(forward(images));
  p.labels = nn::argmax_channel(p.probabilities);
  return p;
}

std::vector<nn::NamedTensor> SegmentationModel::decoder_parameters() {
  std::vector<nn::NamedTensor> out;
  for (auto& p : named_parameters())
    if (p.name.rfind("encoder.", 0) != 0) out.push_back(p);
  return out;
}

namespace {

Tensor upsample_to(const Tensor& x, std::size_t h, std::size_t w) {
  if (x.dim(2) == h && x.dim(3) == w) return x;
  return nn::resize_bilinear(x, h, w);
}

std::size_t half(std::size_t c) { return std::max<std::size_t>(1, c / 2); }

}  // namespace

// ---------------------------------------------------------------------------

UNet::UNet(const ModelConfig& config, std::uint64_t seed) : SegmentationModel(config, seed) {
  Encoder& enc = encoder();
  // Decoder convs keep at least decoder_width channels so that the
  // high-resolution end of the expansive path is not starved.
  std::size_t deep = enc.level_channels(kPyramidLevels - 1);
  for (std::size_t level = kPyramidLevels - 1; level-- > 0;) {
    const std::size_t up_channels = half(deep);
    const std::size_t skip = enc.level_channels(level);
    const std::size_t width = std::max(skip, config.decoder_width);
    const std::string name = "decoder" + std::to_string(level);
    Level l;
    l.up = add_module(name + ".up", std::make_unique<nn::ConvTranspose2d>(deep, up_channels, 2, 2, rng()));
    l.conv1 = add_module(name + ".conv1", std::make_unique<ConvBnAct>(up_channels + skip, conv_spec(width, 3), rng()));
    l.conv2 = add_module(name + ".conv2", std::make_unique<ConvBnAct>(width, conv_spec(width, 3), rng()));
    levels_.push_back(l);
    deep = width;
  }
  classifier_ = add_module("classifier", std::make_unique<nn::Conv2d>(
                                             deep, conv_spec(config.num_classes, 1), true, rng()));
}

Tensor UNet::decode(const FeaturePyramid& pyramid, std::size_t h, std::size_t w) {
  Tensor y = pyramid.level(kPyramidLevels - 1);
  std::size_t level = kPyramidLevels - 1;
  for (auto& l : levels_) {
    --level;
    const Tensor parts[] = {l.up->forward(y), pyramid.level(level)};
    y = l.conv2->forward(l.conv1->forward(ops::concat(parts, 1)));
  }
  return classifier_->forward(upsample_to(y, h, w));
}

// ---------------------------------------------------------------------------

Fpn::Fpn(const ModelConfig& config, std::uint64_t seed) : SegmentationModel(config, seed) {
  const std::size_t d = config.decoder_width;
  for (std::size_t level = 1; level < kPyramidLevels; ++level) {
    laterals_.push_back(add_module("lateral" + std::to_string(level),
                                   std::make_unique<nn::Conv2d>(encoder().level_channels(level),
                                                                conv_spec(d, 1), true, rng())));
  }
  for (std::size_t level = 1; level < kPyramidLevels; ++level) {
    heads_.push_back(add_module("head" + std::to_string(level),
                                std::make_unique<ConvBnAct>(d, conv_spec(d, 3), rng())));
  }
  fuse_ = add_module("fuse", std::make_unique<ConvBnAct>(d, conv_spec(d, 3), rng()));
  classifier_ = add_module("classifier", std::make_unique<nn::Conv2d>(d, conv_spec(config.num_classes, 1), true, rng()));
}

std::vector<Tensor> Fpn::lateral_outputs(const FeaturePyramid& pyramid) {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < laterals_.size(); ++i) out.push_back(laterals_[i]->forward(pyramid.level(i + 1)));
  return out;
}

Tensor Fpn::decode(const FeaturePyramid& pyramid, std::size_t h, std::size_t w) {
  std::vector<Tensor> p = lateral_outputs(pyramid);
  // Top-down pathway: P_i = lateral_i + nearest x2 (P_{i+1}).
  for (std::size_t i = p.size() - 1; i-- > 0;) p[i] = ops::add(p[i], nn::nearest_upsample(p[i + 1], 2));
  const std::size_t h4 = p[0].dim(2), w4 = p[0].dim(3);
  Tensor merged;
  for (std::size_t i = 0; i < p.size(); ++i) {
    Tensor head = upsample_to(heads_[i]->forward(p[i]), h4, w4);
    merged = merged.defined() ? ops::add(merged, head) : head;
  }
  return upsample_to(classifier_->forward(fuse_->forward(merged)), h, w);
}

// ---------------------------------------------------------------------------

LinkNet::LinkNet(const ModelConfig& config, std::uint64_t seed) : SegmentationModel(config, seed) {
  for (std::size_t level = kPyramidLevels - 1; level >= 1; --level) {
    Block b;
    b.in = encoder().level_channels(level);
    b.mid = std::max<std::size_t>(1, b.in / 4);
    b.out = encoder().level_channels(level - 1);
    const std::string name = "decoder" + std::to_string(level);
    b.reduce = add_module(name + ".reduce", std::make_unique<ConvBnAct>(b.in, conv_spec(b.mid, 1), rng()));
    b.up = add_module(name + ".up", std::make_unique<nn::ConvTranspose2d>(b.mid, b.mid, 2, 2, rng()));
    b.up_bn = add_module(name + ".up_bn", std::make_unique<nn::BatchNorm2d>(b.mid));
    b.expand = add_module(name + ".expand", std::make_unique<ConvBnAct>(b.mid, conv_spec(b.out, 1), rng()));
    blocks_.push_back(b);
  }
  const std::size_t c0 = encoder().level_channels(0);
  const std::size_t d = config.decoder_width;
  final_up_ = add_module("final_up", std::make_unique<nn::ConvTranspose2d>(c0, d, 2, 2, rng()));
  final_bn_ = add_module("final_bn", std::make_unique<nn::BatchNorm2d>(d));
  final_conv_ = add_module("final_conv", std::make_unique<ConvBnAct>(d, conv_spec(d, 3), rng()));
  classifier_ = add_module("classifier", std::make_unique<nn::Conv2d>(d, conv_spec(config.num_classes, 1), true, rng()));
}

Tensor LinkNet::decode(const FeaturePyramid& pyramid, std::size_t h, std::size_t w) {
  Tensor y = pyramid.level(kPyramidLevels - 1);
  std::size_t level = kPyramidLevels - 1;
  for (auto& b : blocks_) {
    Tensor z = b.reduce->forward(y);
    z = nn::relu(b.up_bn->forward(b.up->forward(z)));
    z = b.expand->forward(z);
    y = ops::add(z, pyramid.level(--level));  // link: addition, not concat
  }
  y = final_conv_->forward(nn::relu(final_bn_->forward(final_up_->forward(y))));
  return upsample_to(classifier_->forward(y), h, w);
}

// ---------------------------------------------------------------------------

PspNet::PspNet(const ModelConfig& config, std::uint64_t seed) : SegmentationModel(config, seed) {
  encoder().set_output_stride(8);
  feature_channels_ = encoder().level_channels(kPyramidLevels - 1);
  branch_channels_ = std::max<std::size_t>(1, feature_channels_ / config.pyramid_bins.size());
  for (std::size_t i = 0; i < config.pyramid_bins.size(); ++i) {
    branches_.push_back(add_module("bin" + std::to_string(config.pyramid_bins[i]),
                                   std::make_unique<nn::Conv2d>(feature_channels_,
                                                                conv_spec(branch_channels_, 1), true, rng())));
  }
  fuse_ = add_module("fuse", std::make_unique<ConvBnAct>(concat_channels(), conv_spec(config.decoder_width, 3), rng()));
  classifier_ = add_module("classifier", std::make_unique<nn::Conv2d>(
                                             config.decoder_width, conv_spec(config.num_classes, 1), true, rng()));
}

Tensor PspNet::branch_output(std::size_t i, const Tensor& feature) {
  const Tensor pooled = nn::adaptive_avg_pool(feature, config().pyramid_bins.at(i));
  return upsample_to(nn::relu(branches_.at(i)->forward(pooled)), feature.dim(2), feature.dim(3));
}

Tensor PspNet::decode(const FeaturePyramid& pyramid, std::size_t h, std::size_t w) {
  const Tensor& feature = pyramid.deepest();
  std::vector<Tensor> parts{feature};
  for (std::size_t i = 0; i < branches_.size(); ++i) parts.push_back(branch_output(i, feature));
  const Tensor y = fuse_->forward(ops::concat(parts, 1));
  return upsample_to(classifier_->forward(y), h, w);
}

// ---------------------------------------------------------------------------

DeepLabV3Plus::DeepLabV3Plus(const ModelConfig& config, std::uint64_t seed)
    : SegmentationModel(config, seed) {
  encoder().set_output_stride(config.output_stride);
  const std::size_t c = encoder().level_channels(kPyramidLevels - 1);
  const std::size_t d = config.decoder_width;
  aspp_.push_back(add_module("aspp.conv1x1", std::make_unique<ConvBnAct>(c, conv_spec(d, 1), rng())));
  for (auto rate : config.effective_atrous_rates()) {
    aspp_.push_back(add_module("aspp.rate" + std::to_string(rate),
                               std::make_unique<ConvBnAct>(c, conv_spec(d, 3, 1, rate), rng())));
  }
  image_pool_ = add_module("aspp.pool", std::make_unique<nn::Conv2d>(c, conv_spec(d, 1), true, rng()));
  aspp_project_ = add_module("aspp.project", std::make_unique<ConvBnAct>(d * (aspp_.size() + 1), conv_spec(d, 1), rng()));
  low_level_ = add_module("low_level", std::make_unique<ConvBnAct>(encoder().level_channels(1),
                                                                   conv_spec(kLowLevelChannels, 1), rng()));
  refine1_ = add_module("refine1", std::make_unique<ConvBnAct>(d + kLowLevelChannels, conv_spec(d, 3), rng()));
  refine2_ = add_module("refine2", std::make_unique<ConvBnAct>(d, conv_spec(d, 3), rng()));
  classifier_ = add_module("classifier", std::make_unique<nn::Conv2d>(d, conv_spec(config.num_classes, 1), true, rng()));
}

std::vector<std::size_t> DeepLabV3Plus::decoder_upsample_factors() const {
  return {config().output_stride / 4, 4};
}

Tensor DeepLabV3Plus::aspp(const Tensor& feature) {
  std::vector<Tensor> parts;
  for (auto* b : aspp_) parts.push_back(b->forward(feature));
  const Tensor pooled = nn::relu(image_pool_->forward(nn::adaptive_avg_pool(feature, 1)));
  parts.push_back(upsample_to(pooled, feature.dim(2), feature.dim(3)));
  return aspp_project_->forward(ops::concat(parts, 1));
}

Tensor DeepLabV3Plus::decode(const FeaturePyramid& pyramid, std::size_t h, std::size_t w) {
  const auto factors = decoder_upsample_factors();
  Tensor y = aspp(pyramid.deepest());
  y = nn::bilinear_upsample(y, factors[0]);
  const Tensor parts[] = {y, low_level_->forward(pyramid.level(1))};
  y = refine2_->forward(refine1_->forward(ops::concat(parts, 1)));
  y = nn::bilinear_upsample(classifier_->forward(y), factors[1]);
  if (y.dim(2) != h || y.dim(3) != w) fail(Errc::kShapeMismatch, "deeplab decoder size");
  return y;
}

std::unique_ptr<SegmentationModel> build_model(const ModelConfig& config, std::uint64_t seed) {
  switch (config.architecture) {
    case Architecture::kUnet: return std::make_unique<UNet>(config, seed);
    case Architecture::kFpn: return std::make_unique<Fpn>(config, seed);
    case Architecture::kLinknet: return std::make_unique<LinkNet>(config, seed);
    case Architecture::kPspnet: return std::make_unique<PspNet>(config, seed);
    case Architecture::kDeeplabv3plus: return std::make_unique<DeepLabV3Plus>(config, seed);
  }
  fail(Errc::kBadConfig, "unknown architecture");
}

}  // namespace segkit::models
