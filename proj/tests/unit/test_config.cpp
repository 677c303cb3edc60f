#include <gtest/gtest.h>

#include <fstream>

#include "fixtures.hpp"
#include "segkit/config.hpp"
#include "segkit/error.hpp"

using namespace segkit;
using namespace segkit::train;
using segkit::testing::TempDir;

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

}  // namespace

TEST(TrainConfig, DefaultsFollowTheTrainingTable) {
  TrainConfig c;
  EXPECT_EQ(c.learning_rate, 1e-4);
  EXPECT_EQ(c.batch_size, 8u);
  EXPECT_EQ(c.epochs, 50u);
  EXPECT_EQ(c.eval_threshold, 0.5);
  EXPECT_EQ(c.loss.kind, losses::LossKind::kCategoricalCe);
  EXPECT_FALSE(c.freeze_encoder);
  EXPECT_NO_THROW(c.validate());
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  c.learning_rate = 0;
  expect_error(Errc::kBadConfig, [&] { c.validate(); });
  c = {};
  c.epochs = 0;
  expect_error(Errc::kBadConfig, [&] { c.validate(); });
  c = {};
  c.batch_size = 0;
  expect_error(Errc::kBadConfig, [&] { c.validate(); });
  c = {};
  c.eval_threshold = 1.0;
  expect_error(Errc::kBadConfig, [&] { c.validate(); });
  c = {};
  c.resize_h = 64;
  expect_error(Errc::kBadConfig, [&] { c.validate(); });
  c.resize_w = 40;
  expect_error(Errc::kInputNotDivisible, [&] { c.validate(); });
  c = {};
  c.model.num_classes = 1;
  expect_error(Errc::kBadConfig, [&] { c.validate(); });
  c = {};
  c.loss.class_weights = {1, 2};
  expect_error(Errc::kBadConfig, [&] { c.validate(); });
}

TEST(Settings, ParseCommentsAndWhitespace) {
  const auto s = parse_settings("# header\n  epochs = 3  # trailing\n\nbackbone=vgg\r\nresize_to = 64x96\n");
  ASSERT_EQ(s.size(), 3u);
  EXPECT_EQ(s[0], (std::pair<std::string, std::string>{"epochs", "3"}));
  EXPECT_EQ(s[1].second, "vgg");
  EXPECT_EQ(s[2].second, "64x96");
  try {
    parse_settings("epochs = 1\nnot a setting\n", "run.cfg");
    ADD_FAILURE();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::kBadConfig);
    EXPECT_NE(std::string(e.what()).find("run.cfg:2"), std::string::npos) << e.what();
  }
  expect_error(Errc::kBadConfig, [] { parse_settings(" = 4\n"); });
}

TEST(Settings, ApplyEveryKind) {
  TrainConfig c;
  apply_settings(c, parse_settings("architecture = fpn\nbackbone = efficientnet\nbase_width = 8\n"
                                   "depth_per_stage = 1, 2, 3, 4\ncompound_phi = 1.5\n"
                                   "num_classes = 5\npyramid_bins = 1,2,4\natrous_rates = 2,4\n"
                                   "loss = weighted_ce\nclass_weights = 1,2,3,4,5\nlr = 0.001\n"
                                   "freeze_encoder = yes\nresize_to = 64x128\n"
                                   "combinations = unet:vgg, pspnet:resnet\nabsent_class_policy = zero\n"
                                   "unknown_color = strict\n"));
  EXPECT_EQ(c.model.architecture, models::Architecture::kFpn);
  EXPECT_EQ(c.model.backbone.family, models::Family::kEfficientnet);
  EXPECT_EQ(c.model.backbone.base_width, 8u);
  EXPECT_EQ(c.model.backbone.depth_per_stage, (std::vector<std::size_t>{1, 2, 3, 4}));
  EXPECT_EQ(c.model.backbone.compound_phi, 1.5);
  EXPECT_EQ(c.model.num_classes, 5u);
  EXPECT_EQ(c.model.pyramid_bins, (std::vector<std::size_t>{1, 2, 4}));
  EXPECT_EQ(c.model.atrous_rates, (std::vector<std::size_t>{2, 4}));
  EXPECT_EQ(c.loss.kind, losses::LossKind::kWeightedCe);
  EXPECT_EQ(c.loss.class_weights, (std::vector<double>{1, 2, 3, 4, 5}));
  EXPECT_EQ(c.learning_rate, 0.001);
  EXPECT_TRUE(c.freeze_encoder);
  EXPECT_EQ(c.resize_h, 64u);
  EXPECT_EQ(c.resize_w, 128u);
  ASSERT_EQ(c.combinations.size(), 2u);
  EXPECT_EQ(c.combinations[1], (Combination{models::Architecture::kPspnet, models::Family::kResnet}));
  EXPECT_EQ(c.absent_class_policy, metrics::AbsentClassPolicy::kZero);
  EXPECT_EQ(c.unknown_color, data::UnknownColorPolicy::kStrict);
  EXPECT_NO_THROW(c.validate());
}

TEST(Settings, BadValuesNameTheKey) {
  TrainConfig c;
  for (auto [k, v] : std::vector<std::pair<const char*, const char*>>{
           {"epochs", "-1"}, {"epochs", "three"}, {"learning_rate", "fast"}, {"freeze_encoder", "maybe"},
           {"resize_to", "64"}, {"backbone", "alexnet"}, {"architecture", "segnet"}, {"loss", "focal"},
           {"combinations", "unet"}, {"depth_per_stage", "1,x"}, {"no_such_key", "1"}}) {
    try {
      apply_setting(c, k, v);
      ADD_FAILURE() << k << "=" << v;
    } catch (const Error& e) {
      EXPECT_TRUE(e.code() == Errc::kBadConfig || e.code() == Errc::kBadSpec) << e.what();
      EXPECT_NE(std::string(e.what()).find(k), std::string::npos) << e.what();
    }
  }
}

// Later settings win: file first, then command-line overrides.
TEST(Settings, LaterOverridesEarlier) {
  TempDir dir("cfg");
  std::ofstream(dir / "run.cfg") << "epochs = 7\nseed = 3\n";
  TrainConfig c;
  apply_settings(c, read_settings(dir / "run.cfg"));
  EXPECT_EQ(c.epochs, 7u);
  apply_setting(c, "epochs", "1");
  EXPECT_EQ(c.epochs, 1u);
  EXPECT_EQ(c.seed, 3u);
  expect_error(Errc::kMissingFile, [&] { read_settings(dir / "absent.cfg"); });
}

TEST(Settings, RenderRoundTrip) {
  TrainConfig c;
  c.model.architecture = models::Architecture::kDeeplabv3plus;
  c.model.backbone.family = models::Family::kMobilenet;
  c.model.output_stride = 8;
  c.learning_rate = 3.0e-4 / 7;  // needs all 17 digits
  c.loss.smoothing = 0.1;
  c.seed = 12345678901234ULL;
  c.resize_h = 96;
  c.resize_w = 64;
  c.combinations = {{models::Architecture::kUnet, models::Family::kVgg}};
  c.train_manifest = "data/train.manifest";
  const std::string text = render_settings(to_settings(c));
  TrainConfig d;
  apply_settings(d, parse_settings(text));
  EXPECT_EQ(render_settings(to_settings(d)), text);
  EXPECT_EQ(d.learning_rate, c.learning_rate);
  EXPECT_EQ(d.seed, c.seed);
  EXPECT_EQ(d.model.output_stride, 8u);
  EXPECT_EQ(d.combinations, c.combinations);
  EXPECT_EQ(d.train_manifest, c.train_manifest);
}

TEST(Combination, ParseAndNames) {
  const auto c = parse_combination("deeplabv3plus:efficientnet");
  EXPECT_EQ(c.architecture, models::Architecture::kDeeplabv3plus);
  EXPECT_EQ(to_string(c), "deeplabv3plus:efficientnet");
  expect_error(Errc::kBadConfig, [] { parse_combination("unet-vgg"); });
  EXPECT_EQ(display_name(models::Architecture::kFpn), "FPN");
  EXPECT_EQ(display_name(models::Family::kEfficientnet), "EfficientNet");
}
