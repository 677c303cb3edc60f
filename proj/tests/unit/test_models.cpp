#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <map>
#include <vector>

#include "fixtures.hpp"
#include "segkit/autograd.hpp"
#include "segkit/error.hpp"
#include "segkit/losses.hpp"
#include "segkit/models.hpp"
#include "segkit/nn.hpp"
#include "segkit/ops.hpp"

using namespace segkit;
using namespace segkit::models;
using segkit::testing::random_tensor;

namespace {

template <class F>
void expect_error(Errc code, F&& f) {
  try {
    f();
    ADD_FAILURE() << "expected " << to_string(code);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), code) << e.what();
  }
}

ModelConfig config(Architecture arch, Family family = Family::kResnet, std::size_t base = 16) {
  ModelConfig c;
  c.architecture = arch;
  c.backbone.family = family;
  c.backbone.base_width = base;
  return c;
}

bool same_bits(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

// 32-pixel inputs leave a 4x4 stride-8 map, too small for a 6-bin pyramid.
ModelConfig small(Architecture arch, Family family = Family::kResnet, std::size_t base = 8) {
  ModelConfig c = config(arch, family, base);
  c.pyramid_bins = {1, 2, 3, 4};
  return c;
}

Tensor zeros_like(const Tensor& t) { return Tensor::zeros(t.shape()); }

}  // namespace

// All 30 architecture x backbone pairs give full-resolution logits.
TEST(Models, GridProducesFullResolutionLogits) {
  nn::Rng rng(1);
  const Tensor x = random_tensor(rng, {1, 3, 64, 64}, 0, 1);
  for (auto arch : kAllArchitectures) {
    for (auto fam : kAllFamilies) {
      auto model = build_model(config(arch, fam), 3);
      const Tensor y = model->forward(x);
      EXPECT_EQ(y.shape(), (Shape{1, 22, 64, 64})) << to_string(arch) << "/" << to_string(fam);
      for (double v : y.data()) ASSERT_TRUE(std::isfinite(v)) << to_string(arch) << "/" << to_string(fam);
    }
  }
}

TEST(Models, BatchAndRectangularInputs) {
  nn::Rng rng(2);
  const Tensor x = random_tensor(rng, {2, 3, 32, 96}, 0, 1);
  for (auto arch : kAllArchitectures) {
    auto model = build_model(small(arch), 1);
    EXPECT_EQ(model->forward(x).shape(), (Shape{2, 22, 32, 96})) << to_string(arch);
  }
}

TEST(Models, InputNotDivisible) {
  auto model = build_model(config(Architecture::kFpn, Family::kResnet, 8), 1);
  expect_error(Errc::kInputNotDivisible, [&] { model->forward(Tensor::zeros({1, 3, 48, 64})); });
  expect_error(Errc::kInputNotDivisible, [&] { model->forward(Tensor::zeros({1, 3, 64, 40})); });
}

TEST(ModelConfig, Validation) {
  ModelConfig c;
  EXPECT_NO_THROW(c.validate());
  c.num_classes = 1;
  expect_error(Errc::kBadConfig, [&] { c.validate(); });
  c = {};
  c.decoder_width = 0;
  expect_error(Errc::kBadConfig, [&] { c.validate(); });
  c = {};
  c.pyramid_bins = {1, 3, 2};
  expect_error(Errc::kBadConfig, [&] { c.validate(); });
  c = {};
  c.atrous_rates = {6, 6};
  expect_error(Errc::kBadConfig, [&] { c.validate(); });
  c = {};
  c.output_stride = 4;
  expect_error(Errc::kBadConfig, [&] { c.validate(); });
  c = {};
  c.backbone.depth_per_stage = {2, 2, 2};
  expect_error(Errc::kBadSpec, [&] { c.validate(); });
}

TEST(ModelConfig, DefaultAtrousRates) {
  ModelConfig c;
  EXPECT_EQ(c.effective_atrous_rates(), (std::vector<std::size_t>{6, 12, 18}));
  c.output_stride = 8;
  EXPECT_EQ(c.effective_atrous_rates(), (std::vector<std::size_t>{3, 6, 9}));
  c.atrous_rates = {2, 4};
  EXPECT_EQ(c.effective_atrous_rates(), (std::vector<std::size_t>{2, 4}));
}

TEST(ModelNames, RoundTrip) {
  for (auto arch : kAllArchitectures) EXPECT_EQ(parse_architecture(to_string(arch)), arch);
  expect_error(Errc::kBadConfig, [] { parse_architecture("segnet"); });
}

// --- U-Net -----------------------------------------------------------------

TEST(UNet, CanonicalHas23Convolutions) {
  auto c = config(Architecture::kUnet, Family::kVgg);
  c.backbone.depth_per_stage = {2, 2, 2, 2};
  auto model = build_model(c, 0);
  EXPECT_EQ(model->conv_layer_count(), 23u);
}

TEST(UNet, SkipConnectionsReachTheOutput) {
  nn::Rng rng(4);
  auto model = build_model(config(Architecture::kUnet, Family::kResnet, 8), 5);
  model->set_training(false);
  const auto pyramid = model->encoder().forward(random_tensor(rng, {1, 3, 32, 32}, 0, 1));
  const Tensor base = model->decode(pyramid, 32, 32);
  for (std::size_t level = 0; level + 1 < kPyramidLevels; ++level) {
    auto ablated = pyramid;
    ablated.levels[level] = zeros_like(pyramid.levels[level]);
    EXPECT_GT(max_abs_diff(base, model->decode(ablated, 32, 32)), 1e-9) << "level " << level;
  }
}

// --- FPN -------------------------------------------------------------------

TEST(Fpn, LateralsShareDecoderWidth) {
  nn::Rng rng(6);
  const Tensor x = random_tensor(rng, {1, 3, 64, 64}, 0, 1);
  for (auto fam : kAllFamilies) {
    auto c = config(Architecture::kFpn, fam, 8);
    c.decoder_width = 24;
    Fpn model(c, 1);
    const auto laterals = model.lateral_outputs(model.encoder().forward(x));
    ASSERT_EQ(laterals.size(), 4u);
    for (std::size_t i = 0; i < 4; ++i) {
      EXPECT_EQ(laterals[i].dim(1), 24u) << to_string(fam);
      EXPECT_EQ(laterals[i].dim(2), 64u >> (i + 2)) << to_string(fam);
    }
  }
}

// With every lateral but the deepest silenced the decoder still upsamples
// the top feature to full resolution.
TEST(Fpn, DeepestLevelAloneStillDecodes) {
  nn::Rng rng(7);
  Fpn model(config(Architecture::kFpn, Family::kResnet, 8), 2);
  const Tensor x = random_tensor(rng, {1, 3, 64, 64}, 0, 1);
  auto pyramid = model.encoder().forward(x);
  for (std::size_t level = 1; level < 4; ++level) pyramid.levels[level] = zeros_like(pyramid.levels[level]);
  const auto laterals = model.lateral_outputs(pyramid);
  for (std::size_t i = 0; i < 3; ++i) {
    // zero input through a 1x1 conv leaves only its bias
    const auto& b = model.lateral(i).bias();
    for (std::size_t j = 0; j < laterals[i].numel(); ++j)
      ASSERT_EQ(laterals[i].data()[j], b[j / (laterals[i].dim(2) * laterals[i].dim(3))]);
  }
  const Tensor y = model.decode(pyramid, 64, 64);
  EXPECT_EQ(y.shape(), (Shape{1, 22, 64, 64}));
  for (double v : y.data()) ASSERT_TRUE(std::isfinite(v));
}

// --- LinkNet ---------------------------------------------------------------

TEST(LinkNet, BlocksAreAdditiveBottlenecks) {
  for (auto fam : kAllFamilies) {
    LinkNet model(config(Architecture::kLinknet, fam, 16), 1);
    ASSERT_EQ(model.block_count(), 4u);
    for (std::size_t i = 0; i < 4; ++i) {
      const std::size_t level = 4 - i;
      const std::size_t in = i == 0 ? model.encoder().level_channels(level) : model.block_output_channels(i - 1);
      EXPECT_EQ(model.block_input_channels(i), in);
      EXPECT_EQ(in, model.encoder().level_channels(level)) << to_string(fam);
      EXPECT_EQ(model.bottleneck_channels(i), in / 4) << to_string(fam);
      // output is added to the next shallower level, so widths must agree
      EXPECT_EQ(model.block_output_channels(i), model.encoder().level_channels(level - 1)) << to_string(fam);
    }
  }
}

// Shifting a skip level by a constant shifts the sum feeding the next block.
// With everything else fixed the output must change.
TEST(LinkNet, SkipLevelsReachTheOutput) {
  nn::Rng rng(8);
  LinkNet model(config(Architecture::kLinknet, Family::kResnet, 8), 3);
  model.set_training(false);
  const auto pyramid = model.encoder().forward(random_tensor(rng, {1, 3, 32, 32}, 0, 1));
  const Tensor base = model.decode(pyramid, 32, 32);
  for (std::size_t level = 0; level < 4; ++level) {
    auto shifted = pyramid;
    shifted.levels[level] = ops::add_scalar(pyramid.levels[level], 0.5);
    EXPECT_GT(max_abs_diff(base, model.decode(shifted, 32, 32)), 1e-9) << "level " << level;
  }
}

// --- PSPNet ----------------------------------------------------------------

TEST(PspNet, BranchWidthIsFeatureOverBins) {
  // base 4 gives a 64-channel stride-8 feature
  PspNet model(config(Architecture::kPspnet, Family::kResnet, 4), 1);
  EXPECT_EQ(model.feature_channels(), 64u);
  EXPECT_EQ(model.branch_channels(), 16u);
  EXPECT_EQ(model.concat_channels(), 128u);
  EXPECT_EQ(model.encoder().output_stride(), 8u);

  nn::Rng rng(9);
  const auto pyramid = model.encoder().forward(random_tensor(rng, {1, 3, 64, 64}, 0, 1));
  EXPECT_EQ(pyramid.deepest().dim(2), 8u);
  EXPECT_EQ(pyramid.deepest().dim(3), 8u);
  for (std::size_t i = 0; i < 4; ++i) {
    const Tensor b = model.branch_output(i, pyramid.deepest());
    EXPECT_EQ(b.shape(), (Shape{1, 16, 8, 8}));
  }
}

TEST(PspNet, UnitBinIsBroadcastGlobalContext) {
  auto c = config(Architecture::kPspnet, Family::kResnet, 4);
  PspNet model(c, 2);
  nn::Rng rng(10);
  const Tensor feature = random_tensor(rng, {1, 64, 8, 8});
  const Tensor b = model.branch_output(0, feature);

  // Oracle: per-channel mean, then a dense projection and relu.
  auto params = model.named_parameters();
  const Tensor* w = nullptr;
  const Tensor* bias = nullptr;
  for (auto& p : params) {
    if (p.name == "bin1.weight") w = p.tensor;
    if (p.name == "bin1.bias") bias = p.tensor;
  }
  ASSERT_TRUE(w && bias);
  std::vector<double> mean(64, 0.0);
  for (std::size_t ch = 0; ch < 64; ++ch) {
    for (std::size_t q = 0; q < 64; ++q) mean[ch] += feature.data()[ch * 64 + q];
    mean[ch] /= 64;
  }
  for (std::size_t o = 0; o < 16; ++o) {
    double acc = (*bias)[o];
    for (std::size_t ch = 0; ch < 64; ++ch) acc += (*w)[o * 64 + ch] * mean[ch];
    const double expect = std::max(acc, 0.0);
    for (std::size_t q = 0; q < 64; ++q) ASSERT_NEAR(b.data()[o * 64 + q], expect, 1e-12) << o;
  }
}

// --- DeepLabV3+ ------------------------------------------------------------

TEST(DeepLab, AsppSeesOutputStrideFeature) {
  nn::Rng rng(11);
  const Tensor x = random_tensor(rng, {1, 3, 64, 64}, 0, 1);
  for (std::size_t os : {16u, 8u}) {
    auto c = config(Architecture::kDeeplabv3plus, Family::kResnet, 8);
    c.output_stride = os;
    DeepLabV3Plus model(c, 1);
    const auto pyramid = model.encoder().forward(x);
    EXPECT_EQ(pyramid.deepest().dim(2), 64 / os);
    EXPECT_EQ(pyramid.deepest().dim(3), 64 / os);
    EXPECT_EQ(model.aspp(pyramid.deepest()).dim(2), 64 / os);
    EXPECT_EQ(model.decoder_upsample_factors(), (std::vector<std::size_t>{os / 4, 4}));
    EXPECT_EQ(model.forward(x).shape(), (Shape{1, 22, 64, 64}));
  }
}

TEST(DeepLab, DefaultDecoderFactors) {
  DeepLabV3Plus model(config(Architecture::kDeeplabv3plus, Family::kResnet, 8), 1);
  EXPECT_EQ(model.decoder_upsample_factors(), (std::vector<std::size_t>{4, 4}));
  EXPECT_EQ(model.aspp_branch_count(), 4u);  // 1x1 plus three rates
}

// A rate-1 atrous branch is an ordinary 3x3 conv + BN + relu.
TEST(DeepLab, RateOneBranchIsStandardConv) {
  auto c = config(Architecture::kDeeplabv3plus, Family::kResnet, 8);
  c.atrous_rates = {1};
  DeepLabV3Plus model(c, 4);
  model.set_training(false);
  nn::Rng rng(12);
  auto& branch = model.aspp_branch(1);
  // non-trivial running statistics
  auto& st = branch.bn().state();
  for (std::size_t i = 0; i < st.running_mean.size(); ++i) {
    st.running_mean[i] = rng.uniform(-0.5, 0.5);
    st.running_var[i] = rng.uniform(0.5, 2.0);
  }
  const Tensor feature = random_tensor(rng, {1, model.encoder().level_channels(4), 4, 4});
  nn::ConvSpec spec = branch.conv().spec();
  spec.dilation_rate = 1;
  const Tensor expect =
      nn::relu(nn::batch_norm(nn::conv2d_standard(feature, branch.conv().weight(), Tensor(), spec), st, false));
  const Tensor got = branch.forward(feature);
  EXPECT_LE(max_abs_diff(got, expect), 1e-12);
}

// --- prediction ------------------------------------------------------------

TEST(Predict, ProbabilitiesAndLabelsAreConsistent) {
  nn::Rng rng(13);
  const Tensor x = random_tensor(rng, {2, 3, 32, 32}, 0, 1);
  for (auto arch : kAllArchitectures) {
    auto c = small(arch);
    c.num_classes = 5;
    auto model = build_model(c, 6);
    model->set_training(false);
    const Tensor logits = model->forward(x);
    const auto p = model->predict(x);
    const auto again = model->predict(x);
    EXPECT_TRUE(same_bits(p.probabilities, again.probabilities)) << to_string(arch);
    EXPECT_EQ(p.labels, again.labels);
    EXPECT_EQ(p.labels, nn::argmax_channel(logits)) << to_string(arch);
    const std::size_t hw = 32 * 32;
    for (std::size_t n = 0; n < 2; ++n) {
      for (std::size_t q = 0; q < hw; ++q) {
        double s = 0;
        for (std::size_t k = 0; k < 5; ++k) s += p.probabilities.data()[(n * 5 + k) * hw + q];
        ASSERT_NEAR(s, 1.0, 1e-9);
      }
    }
    for (int l : p.labels) {
      ASSERT_GE(l, 0);
      ASSERT_LT(l, 5);
    }
  }
}

TEST(Models, SameSeedSameOutput) {
  nn::Rng rng(14);
  const Tensor x = random_tensor(rng, {1, 3, 32, 32}, 0, 1);
  for (auto arch : kAllArchitectures) {
    auto a = build_model(small(arch, Family::kMobilenet), 21);
    auto b = build_model(small(arch, Family::kMobilenet), 21);
    EXPECT_TRUE(same_bits(a->forward(x), b->forward(x))) << to_string(arch);
  }
}

TEST(Models, DecoderParametersExcludeEncoder) {
  auto model = build_model(config(Architecture::kUnet, Family::kResnet, 8), 1);
  const auto dec = model->decoder_parameters();
  EXPECT_FALSE(dec.empty());
  std::size_t n = 0;
  for (auto& p : dec) {
    EXPECT_NE(p.name.rfind("encoder.", 0), 0u) << p.name;
    n += p.tensor->numel();
  }
  EXPECT_EQ(n + model->encoder().parameter_count(), model->parameter_count());
}

// Tape gradients of a full model against central differences on a sample of
// individual parameter entries. 64x64 keeps the deepest batch-norm maps
// larger than 1x1; on 32x32 batch statistics over two values make the loss
// curved enough that a 1e-5 step is no longer in the linear regime.
TEST(Models, EndToEndGradientsMatchFiniteDifferences) {
  for (auto arch : kAllArchitectures) {
    auto c = config(arch, Family::kResnet, 4);
    c.num_classes = 3;
    c.decoder_width = 8;
    auto model = build_model(c, 31);
    nn::Rng rng(40 + static_cast<int>(arch));
    const Tensor x = random_tensor(rng, {2, 3, 64, 64}, 0, 1);
    const Tensor y = nn::softmax_channel(random_tensor(rng, {2, 3, 64, 64}, -3, 3));
    auto loss_of = [&] { return losses::categorical_ce(y, nn::softmax_channel(model->forward(x))); };

    auto params = model->named_parameters();
    Gradients grads = [&] {
      Tape tape;
      return tape.backward(loss_of());
    }();

    for (int s = 0; s < 10; ++s) {
      auto& p = params[rng.below(params.size())];
      Tensor& t = *p.tensor;
      const std::size_t idx = rng.below(t.numel());
      const auto g = grads.wrt(t);
      const double analytic = g ? (*g)[idx] : 0.0;
      const double h = 1e-5;
      const double orig = t[idx];
      double plus, minus;
      {
        NoGradGuard ng;
        t.mutable_data()[idx] = orig + h;
        plus = loss_of().item();
        t.mutable_data()[idx] = orig - h;
        minus = loss_of().item();
        t.mutable_data()[idx] = orig;
      }
      const double numeric = (plus - minus) / (2 * h);
      EXPECT_LT(std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic)), 1e-3)
          << to_string(arch) << " " << p.name << "[" << idx << "] " << analytic << " vs " << numeric;
    }
  }
}

// Regression snapshot at the default backbone (resnet, base 16) and K = 22.
TEST(Models, ParameterCountSnapshot) {
  const std::map<Architecture, std::size_t> expected = {
      {Architecture::kUnet, 3666854},
      {Architecture::kFpn, 3009830},
      {Architecture::kLinknet, 2890654},
      {Architecture::kPspnet, 3154726},
      {Architecture::kDeeplabv3plus, 3393478},
  };
  for (auto [arch, n] : expected)
    EXPECT_EQ(build_model(config(arch), 0)->parameter_count(), n) << to_string(arch);
}
