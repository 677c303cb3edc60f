#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "segkit/layers.hpp"
#include "segkit/tensor.hpp"

// Desk-scale encoders. Every family has a stride-2 stem followed by four
// stages at nominal strides 4, 8, 16 and 32; each family is a sketch of its
// defining block rather than a published layer table.
namespace segkit::models {

enum class Family { kVgg, kResnet, kDensenet, kInception, kMobilenet, kEfficientnet };

inline constexpr std::array<Family, 6> kAllFamilies = {
    Family::kResnet, Family::kVgg, Family::kDensenet,
    Family::kInception, Family::kMobilenet, Family::kEfficientnet};

std::string_view to_string(Family family);
Family parse_family(std::string_view name);  // kBadSpec on unknown names

struct CompoundCoefficients {
  double alpha = 1.2;  // depth
  double beta = 1.1;   // width
  double gamma = 1.15; // resolution
};

struct BackboneSpec {
  Family family = Family::kResnet;
  std::size_t base_width = 16;  // stem channels
  std::vector<std::size_t> depth_per_stage = {2, 2, 2, 2};
  double compound_phi = 0.0;  // efficientnet only
  CompoundCoefficients coefficients;

  // kBadSpec for zero widths/depths or a stage count other than 4;
  // kBadCoefficients for invalid efficientnet scaling constants.
  void validate() const;
};

struct ScaleMultipliers {
  double depth = 1.0;
  double width = 1.0;
  double resolution = 1.0;
};

// (alpha^phi, beta^phi, gamma^phi). Throws kBadCoefficients unless every
// coefficient is >= 1, phi >= 0 and alpha * beta^2 * gamma^2 is within 5% of 2.
ScaleMultipliers compound_scale(double phi, double alpha, double beta, double gamma);
std::size_t scale_depth(std::size_t depth, double multiplier);  // ceil, >= 1
std::size_t round_width(double width);  // nearest multiple of 8, >= 8

inline constexpr std::size_t kPyramidLevels = 5;

// Level i holds the output of the stem (i = 0) or stage i. `strides` are the
// effective strides, which stop growing once the encoder runs dilated.
struct FeaturePyramid {
  std::array<Tensor, kPyramidLevels> levels;
  std::array<std::size_t, kPyramidLevels> strides{};

  const Tensor& level(std::size_t i) const { return levels.at(i); }
  const Tensor& deepest() const { return levels.back(); }
  // Deepest level with the given effective stride; kBadSpec if none.
  const Tensor& at_stride(std::size_t stride) const;
};

// One resolution step of an encoder.
class Stage : public nn::Module {
 public:
  virtual Tensor forward(const Tensor& x) = 0;
  // stride is 1 or 2; rate dilates the 3x3 convolutions of the stage.
  virtual void configure(std::size_t stride, std::size_t rate) = 0;
  virtual std::size_t out_channels() const = 0;
  // Depthwise families can bypass their pointwise convolutions so that the
  // stage acts per channel. Returns false when unsupported.
  virtual bool set_pointwise_enabled(bool) { return false; }
};

// resnet-style basic block: relu(branch(x) + shortcut(x)).
class ResidualBlock : public nn::Module {
 public:
  ResidualBlock(std::size_t in, std::size_t out, std::size_t stride, nn::Rng& rng);
  Tensor forward(const Tensor& x);
  Tensor shortcut(const Tensor& x);
  void configure(std::size_t stride, std::size_t rate);
  nn::ConvBnAct& branch_first() { return *first_; }
  nn::ConvBnAct& branch_second() { return *second_; }
  bool has_projection() const { return projection_ != nullptr; }

 private:
  nn::ConvBnAct* first_;
  nn::ConvBnAct* second_;  // identity activation; relu after the add
  nn::ConvBnAct* projection_ = nullptr;
};

// Builds the stage at `level` (0 = stem) of a family. Exposed so that tests
// can exercise a stage in isolation.
std::unique_ptr<Stage> make_stage(Family family, std::size_t level, std::size_t in,
                                  std::size_t out, std::size_t depth, nn::Rng& rng);

class Encoder : public nn::Module {
 public:
  Encoder(const BackboneSpec& spec, std::uint64_t seed);

  // Input N x 3 x H x W with H, W divisible by 32 (kInputNotDivisible).
  FeaturePyramid forward(const Tensor& x);

  const BackboneSpec& spec() const { return spec_; }
  std::size_t level_channels(std::size_t level) const { return channels_.at(level); }
  // Effective per-stage depths after compound scaling.
  const std::vector<std::size_t>& stage_depths() const { return depths_; }
  ScaleMultipliers multipliers() const { return multipliers_; }

  // 32 (plain), 16 or 8: late stages drop their striding and dilate by 2 / 4.
  void set_output_stride(std::size_t os);
  std::size_t output_stride() const { return output_stride_; }

  Stage& stage(std::size_t level) { return *stages_.at(level); }

  void freeze() { set_trainable(false); }
  void unfreeze() { set_trainable(true); }

 private:
  BackboneSpec spec_;
  ScaleMultipliers multipliers_;
  std::vector<std::size_t> depths_;
  std::vector<std::size_t> channels_;
  std::vector<Stage*> stages_;
  std::size_t output_stride_ = 32;
};

std::unique_ptr<Encoder> build_backbone(const BackboneSpec& spec, std::uint64_t seed);

// Throws kInputNotDivisible unless H and W of an N x C x H x W tensor are
// multiples of 32.
void require_divisible(const Tensor& x);

}  // namespace segkit::models
