#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "fixtures.hpp"
#include "segkit/error.hpp"
#include "segkit/ops.hpp"
#include "segkit/optim.hpp"
#include "segkit/serialize.hpp"
#include "segkit/train.hpp"

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

TrainConfig small_config(models::Architecture arch = models::Architecture::kUnet) {
  TrainConfig c;
  c.model.architecture = arch;
  c.model.backbone.base_width = 4;
  c.model.decoder_width = 8;
  c.model.num_classes = 2;
  c.model.pyramid_bins = {1, 2, 4};
  c.batch_size = 2;
  c.epochs = 2;
  c.seed = 7;
  return c;
}

const data::InMemorySource& fixture() {
  static const data::InMemorySource src(segkit::testing::overfit_fixture());
  return src;
}

// Serialised bytes of every encoder parameter and buffer.
std::string encoder_bytes(models::SegmentationModel& m) {
  std::ostringstream out;
  for (const auto& p : m.named_parameters())
    if (p.name.rfind("encoder.", 0) == 0) write_tensor(out, *p.tensor);
  for (const auto& b : m.named_buffers()) {
    if (b.name.rfind("encoder.", 0) != 0) continue;
    write_tensor(out, Tensor::from_vector({b.values->size()}, *b.values));
  }
  return out.str();
}

std::string numerics(RunRecord r) {
  r.wall_seconds = 0;
  return to_json(r);
}

class FailingSource : public data::SampleSource {
 public:
  std::size_t size() const override { return 4; }
  data::SegmentationSample load(std::size_t index) const override {
    if (index == 3) fail(Errc::kBadFormat, "unreadable sample");
    return fixture().load(index);
  }
};

}  // namespace

// --- Adam ------------------------------------------------------------------

TEST(Adam, ZeroGradientLeavesParameters) {
  Tensor p = Tensor::create({3}, {1, -2, 3});
  optim::AdamSlot slot;
  for (std::size_t t = 1; t <= 5; ++t) optim::adam_step(p, Tensor::zeros({3}), slot, {}, t);
  EXPECT_EQ(p.data()[0], 1.0);
  EXPECT_EQ(p.data()[1], -2.0);
  EXPECT_EQ(p.data()[2], 3.0);
}

// m_hat = g and v_hat = g^2 after one step, so the update is lr * g/(|g|+eps).
TEST(Adam, FirstStepClosedForm) {
  for (double g : {1.0, -3.0, 0.25}) {
    Tensor p = Tensor::create({1}, {0.5});
    optim::AdamSlot slot;
    optim::adam_step(p, Tensor::create({1}, {g}), slot, {}, 1);
    const double expect = 0.5 - 1e-4 * g / (std::abs(g) + 1e-8);
    EXPECT_NEAR(p.data()[0], expect, 1e-18);
    EXPECT_NEAR(p.data()[0] - 0.5, g > 0 ? -1e-4 : 1e-4, 1e-11);
  }
}

TEST(Adam, StepOpposesFirstMoment) {
  nn::Rng rng(3);
  Tensor p = segkit::testing::random_tensor(rng, {50});
  optim::AdamSlot slot;
  for (std::size_t t = 1; t <= 20; ++t) {
    const Tensor g = segkit::testing::random_tensor(rng, {50});
    const Tensor before = p.clone();
    optim::adam_step(p, g, slot, {}, t);
    for (std::size_t i = 0; i < 50; ++i) {
      const double delta = p.data()[i] - before.data()[i];
      if (slot.m[i] != 0) {
        ASSERT_LT(delta * slot.m[i], 0.0) << t << " " << i;
      }
    }
  }
  optim::AdamSlot fresh;
  expect_error(Errc::kShapeMismatch, [&] { optim::adam_step(p, Tensor::zeros({49}), fresh, {}, 1); });
}

TEST(Adam, SkipsFrozenParameters) {
  Tensor a = Tensor::create({2}, {1, 2});
  Tensor b = Tensor::create({2}, {3, 4});
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  Gradients g = [&] {
    Tape tape;
    return tape.backward(ops::sum(ops::add(ops::square(a), ops::square(b))));
  }();
  b.set_requires_grad(false);
  std::vector<nn::NamedTensor> params{{"a", &a}, {"b", &b}};
  optim::Adam adam;
  adam.step(params, g);
  EXPECT_EQ(adam.steps(), 1u);
  EXPECT_LT(a.data()[0], 1.0);
  EXPECT_EQ(b.data()[0], 3.0);
}

// --- training --------------------------------------------------------------

TEST(Train, LossDecreasesOnTheFixture) {
  const auto r = train::train(small_config(), fixture(), fixture()).record;
  ASSERT_EQ(r.train_loss.size(), 2u);
  EXPECT_LT(r.train_loss[1], r.train_loss[0]);
  EXPECT_EQ(r.val_loss.size(), 2u);
  EXPECT_EQ(r.val_accuracy.size(), 2u);
  EXPECT_EQ(r.val_mean_iou.size(), 2u);
  EXPECT_GE(r.best_epoch, 1u);
  ASSERT_TRUE(r.final_report);
  // best epoch has the highest mean IoU
  for (const auto& m : r.val_mean_iou) EXPECT_LE(m.value_or(-1), r.val_mean_iou[r.best_epoch - 1].value_or(-1));
  EXPECT_EQ(r.final_report->pixel_accuracy, r.val_accuracy[r.best_epoch - 1]);
  EXPECT_EQ(r.architecture, "unet");
  EXPECT_EQ(r.backbone, "resnet");
  EXPECT_GT(r.parameter_count, 0u);
}

TEST(Train, SameSeedSameNumbers) {
  for (auto arch : {models::Architecture::kFpn, models::Architecture::kDeeplabv3plus}) {
    const auto a = train::train(small_config(arch), fixture(), fixture()).record;
    const auto b = train::train(small_config(arch), fixture(), fixture()).record;
    EXPECT_EQ(numerics(a), numerics(b)) << models::to_string(arch);
  }
  auto other = small_config();
  other.seed = 8;
  EXPECT_NE(numerics(train::train(small_config(), fixture(), fixture()).record),
            numerics(train::train(other, fixture(), fixture()).record));
}

TEST(Train, FrozenEncoderIsBitIdentical) {
  auto cfg = small_config(models::Architecture::kLinknet);
  cfg.freeze_encoder = true;
  auto initial = models::build_model(cfg.model, cfg.seed);
  const std::string before = encoder_bytes(*initial);
  auto result = train::train(cfg, fixture(), fixture());
  EXPECT_EQ(encoder_bytes(*result.model), before);
  // the decoder did train
  auto dec0 = initial->decoder_parameters();
  auto dec1 = result.model->decoder_parameters();
  bool moved = false;
  for (std::size_t i = 0; i < dec0.size(); ++i)
    for (std::size_t j = 0; j < dec0[i].tensor->numel(); ++j)
      moved |= (*dec0[i].tensor)[j] != (*dec1[i].tensor)[j];
  EXPECT_TRUE(moved);
}

TEST(Train, Errors) {
  auto cfg = small_config();
  train::TrainOptions opt;
  opt.data_classes = 3;
  expect_error(Errc::kClassCountMismatch, [&] { train::train(cfg, fixture(), fixture(), opt); });
  data::InMemorySource empty({});
  expect_error(Errc::kBadManifest, [&] { train::train(cfg, empty, fixture()); });
  cfg.learning_rate = -1;
  expect_error(Errc::kBadConfig, [&] { train::train(cfg, fixture(), fixture()); });

  FailingSource failing;
  cfg = small_config();
  cfg.epochs = 1;
  try {
    train::train(cfg, failing, fixture());
    ADD_FAILURE();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::kBadFormat);
    EXPECT_NE(std::string(e.what()).find("epoch 1 batch"), std::string::npos) << e.what();
  }
}

// --- evaluation ------------------------------------------------------------

TEST(Evaluate, BatchSizeDoesNotChangeTheMatrix) {
  auto model = models::build_model(small_config().model, 3);
  EvalOptions one, three;
  one.batch_size = 1;
  three.batch_size = 3;
  const auto a = evaluate(*model, fixture(), one);
  const auto b = evaluate(*model, fixture(), three);
  EXPECT_TRUE(a.confusion == b.confusion);
  EXPECT_EQ(a.confusion.total(), 4u * 32 * 32);
  EXPECT_EQ(a.report.mean_iou, b.report.mean_iou);
  EXPECT_EQ(a.report.iou_score, b.report.iou_score);
  EXPECT_NEAR(a.report.loss, b.report.loss, 1e-12);
}

TEST(Evaluate, Errors) {
  auto model = models::build_model(small_config().model, 3);
  data::InMemorySource empty({});
  expect_error(Errc::kEmptyMatrix, [&] { evaluate(*model, empty, {}); });
  EvalOptions o;
  o.data_classes = 5;
  expect_error(Errc::kClassCountMismatch, [&] { evaluate(*model, fixture(), o); });
  o = {};
  o.threshold = 0;
  expect_error(Errc::kBadThreshold, [&] { evaluate(*model, fixture(), o); });
}

TEST(Evaluate, LeavesTrainingFlag) {
  auto model = models::build_model(small_config().model, 3);
  model->set_training(true);
  evaluate(*model, fixture(), {});
  EXPECT_TRUE(model->training());
}

// --- persistence -----------------------------------------------------------

TEST(Checkpoint, RoundTripReproducesReport) {
  TempDir dir("ckpt");
  auto cfg = small_config(models::Architecture::kFpn);
  train::TrainOptions opt;
  opt.checkpoint = dir / "best.ckpt";
  const auto result = train::train(cfg, fixture(), fixture(), opt);
  const auto& saved = *result.record.final_report;

  auto ck = load_checkpoint(dir / "best.ckpt");
  EXPECT_EQ(render_settings(to_settings(ck.config)), render_settings(to_settings(cfg)));
  const auto ev = evaluate(*ck.model, fixture(), EvalOptions::from(ck.config));
  EXPECT_EQ(ev.report.mean_iou, saved.mean_iou);
  EXPECT_EQ(ev.report.pixel_accuracy, saved.pixel_accuracy);
  EXPECT_EQ(ev.report.loss, saved.loss);
  EXPECT_EQ(ev.report.per_class_iou, saved.per_class_iou);
  EXPECT_EQ(ev.report.f1_macro, saved.f1_macro);
  EXPECT_EQ(ev.report.iou_score, saved.iou_score);

  expect_error(Errc::kMissingFile, [&] { load_checkpoint(dir / "none.ckpt"); });
  std::ofstream(dir / "junk.ckpt") << "not a checkpoint\n";
  expect_error(Errc::kBadFormat, [&] { load_checkpoint(dir / "junk.ckpt"); });
}

TEST(Checkpoint, StateRoundTrip) {
  auto a = models::build_model(small_config().model, 1);
  auto b = models::build_model(small_config().model, 2);
  restore_state(*b, capture_state(*a));
  EXPECT_EQ(encoder_bytes(*a), encoder_bytes(*b));
  auto other = small_config(models::Architecture::kFpn).model;
  auto c = models::build_model(other, 1);
  expect_error(Errc::kBadFormat, [&] { restore_state(*c, capture_state(*a)); });
}

TEST(Checkpoint, EncoderTransfersAcrossArchitectures) {
  TempDir dir("transfer");
  auto cfg = small_config(models::Architecture::kUnet);
  cfg.epochs = 1;
  train::TrainOptions opt;
  opt.checkpoint = dir / "unet.ckpt";
  const auto trained = train::train(cfg, fixture(), fixture(), opt);

  auto fpn = models::build_model(small_config(models::Architecture::kFpn).model, 99);
  EXPECT_NE(encoder_bytes(*fpn), encoder_bytes(*trained.model));
  load_encoder(*fpn, dir / "unet.ckpt");
  EXPECT_EQ(encoder_bytes(*fpn), encoder_bytes(*trained.model));

  // through the config key
  auto cfg2 = small_config(models::Architecture::kLinknet);
  cfg2.encoder_checkpoint = (dir / "unet.ckpt").string();
  cfg2.freeze_encoder = true;
  cfg2.epochs = 1;
  EXPECT_EQ(encoder_bytes(*train::train(cfg2, fixture(), fixture()).model), encoder_bytes(*trained.model));

  auto vgg = small_config().model;
  vgg.backbone.family = models::Family::kVgg;
  auto mismatched = models::build_model(vgg, 1);
  expect_error(Errc::kBadFormat, [&] { load_encoder(*mismatched, dir / "unet.ckpt"); });
}

TEST(RunRecord, JsonRoundTrip) {
  TempDir dir("record");
  auto r = train::train(small_config(), fixture(), fixture()).record;
  r.palette = "two";
  save_run_record(dir / "r.json", r);
  const auto back = load_run_record(dir / "r.json");
  EXPECT_EQ(to_json(back), to_json(r));
  EXPECT_EQ(back.train_loss, r.train_loss);

  RunRecord failed;
  failed.architecture = "fpn";
  failed.backbone = "vgg";
  failed.error = "boom";
  EXPECT_TRUE(run_record_from_json(to_json(failed)).failed());
  expect_error(Errc::kBadFormat, [] { run_record_from_json("{"); });
  expect_error(Errc::kMissingFile, [&] { load_run_record(dir / "none.json"); });
}
