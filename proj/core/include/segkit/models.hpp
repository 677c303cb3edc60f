#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string_view>
#include <vector>

#include "segkit/backbones.hpp"
#include "segkit/layers.hpp"

// Encoder-decoder segmentation networks over any backbone family. Every model
// maps N x 3 x H x W images to N x K x H x W logits.
namespace segkit::models {

enum class Architecture { kUnet, kFpn, kLinknet, kPspnet, kDeeplabv3plus };

inline constexpr std::array<Architecture, 5> kAllArchitectures = {
    Architecture::kUnet, Architecture::kFpn, Architecture::kLinknet, Architecture::kPspnet,
    Architecture::kDeeplabv3plus};

std::string_view to_string(Architecture arch);
Architecture parse_architecture(std::string_view name);  // kBadConfig

inline constexpr std::size_t kLowLevelChannels = 48;

struct ModelConfig {
  Architecture architecture = Architecture::kUnet;
  BackboneSpec backbone;
  std::size_t num_classes = 22;
  std::size_t decoder_width = 64;
  std::size_t output_stride = 16;                    // deeplab only
  std::vector<std::size_t> pyramid_bins = {1, 2, 3, 6};  // pspnet
  std::vector<std::size_t> atrous_rates;             // empty: defaults for output_stride

  // kBadConfig on K < 2, zero widths, non-increasing bins, repeated rates or
  // an output stride other than 8/16; backbone errors propagate.
  void validate() const;
  // [6, 12, 18] at output stride 16, halved at 8, unless set explicitly.
  std::vector<std::size_t> effective_atrous_rates() const;
};

class SegmentationModel : public nn::Module {
 public:
  struct Prediction {
    Tensor probabilities;     // softmax over channels
    std::vector<int> labels;  // N*H*W argmax
  };

  // Throws kInputNotDivisible unless H, W are multiples of 32.
  Tensor forward(const Tensor& images);
  Prediction predict(const Tensor& images);

  // Decoder only: maps an encoder pyramid to logits of size h x w.
  virtual Tensor decode(const FeaturePyramid& pyramid, std::size_t h, std::size_t w) = 0;

  Encoder& encoder() { return *encoder_; }
  const ModelConfig& config() const { return config_; }
  // Parameters outside the encoder.
  std::vector<nn::NamedTensor> decoder_parameters();

 protected:
  SegmentationModel(const ModelConfig& config, std::uint64_t seed);
  nn::Rng& rng() { return rng_; }

 private:
  ModelConfig config_;
  nn::Rng rng_;
  Encoder* encoder_;
};

class UNet : public SegmentationModel {
 public:
  UNet(const ModelConfig& config, std::uint64_t seed);
  Tensor decode(const FeaturePyramid& pyramid, std::size_t h, std::size_t w) override;

 private:
  struct Level {
    nn::ConvTranspose2d* up;
    nn::ConvBnAct* conv1;
    nn::ConvBnAct* conv2;
  };
  std::vector<Level> levels_;  // deepest first
  nn::Conv2d* classifier_;
};

class Fpn : public SegmentationModel {
 public:
  Fpn(const ModelConfig& config, std::uint64_t seed);
  Tensor decode(const FeaturePyramid& pyramid, std::size_t h, std::size_t w) override;
  // 1x1 lateral projections for strides 4, 8, 16, 32.
  nn::Conv2d& lateral(std::size_t i) { return *laterals_.at(i); }
  std::vector<Tensor> lateral_outputs(const FeaturePyramid& pyramid);

 private:
  std::vector<nn::Conv2d*> laterals_;
  std::vector<nn::ConvBnAct*> heads_;
  nn::ConvBnAct* fuse_;
  nn::Conv2d* classifier_;
};

class LinkNet : public SegmentationModel {
 public:
  LinkNet(const ModelConfig& config, std::uint64_t seed);
  Tensor decode(const FeaturePyramid& pyramid, std::size_t h, std::size_t w) override;
  // Decoder block i consumes pyramid level 4 - i.
  std::size_t block_count() const { return blocks_.size(); }
  std::size_t block_input_channels(std::size_t i) const { return blocks_.at(i).in; }
  std::size_t bottleneck_channels(std::size_t i) const { return blocks_.at(i).mid; }
  std::size_t block_output_channels(std::size_t i) const { return blocks_.at(i).out; }

 private:
  struct Block {
    std::size_t in, mid, out;
    nn::ConvBnAct* reduce;
    nn::ConvTranspose2d* up;
    nn::BatchNorm2d* up_bn;
    nn::ConvBnAct* expand;
  };
  std::vector<Block> blocks_;
  nn::ConvTranspose2d* final_up_;
  nn::BatchNorm2d* final_bn_;
  nn::ConvBnAct* final_conv_;
  nn::Conv2d* classifier_;
};

class PspNet : public SegmentationModel {
 public:
  PspNet(const ModelConfig& config, std::uint64_t seed);
  Tensor decode(const FeaturePyramid& pyramid, std::size_t h, std::size_t w) override;
  std::size_t feature_channels() const { return feature_channels_; }
  std::size_t branch_channels() const { return branch_channels_; }
  std::size_t concat_channels() const {
    return feature_channels_ + branch_channels_ * branches_.size();
  }
  // Pooled, projected and re-upsampled output of bin branch i.
  Tensor branch_output(std::size_t i, const Tensor& feature);

 private:
  std::size_t feature_channels_;
  std::size_t branch_channels_;
  std::vector<nn::Conv2d*> branches_;
  nn::ConvBnAct* fuse_;
  nn::Conv2d* classifier_;
};

class DeepLabV3Plus : public SegmentationModel {
 public:
  DeepLabV3Plus(const ModelConfig& config, std::uint64_t seed);
  Tensor decode(const FeaturePyramid& pyramid, std::size_t h, std::size_t w) override;
  // Branch 0 is the 1x1 conv; 1.. are the atrous 3x3 convs.
  nn::ConvBnAct& aspp_branch(std::size_t i) { return *aspp_.at(i); }
  std::size_t aspp_branch_count() const { return aspp_.size(); }
  // Input to the ASPP module (the stride-OS feature).
  Tensor aspp(const Tensor& feature);
  // Bilinear factors along the decoder path, in order.
  std::vector<std::size_t> decoder_upsample_factors() const;

 private:
  std::vector<nn::ConvBnAct*> aspp_;
  nn::Conv2d* image_pool_;
  nn::ConvBnAct* aspp_project_;
  nn::ConvBnAct* low_level_;
  nn::ConvBnAct* refine1_;
  nn::ConvBnAct* refine2_;
  nn::Conv2d* classifier_;
};

std::unique_ptr<SegmentationModel> build_model(const ModelConfig& config, std::uint64_t seed);

}  // namespace segkit::models
