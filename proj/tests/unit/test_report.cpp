#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <sstream>

#include "fixtures.hpp"
#include "segkit/error.hpp"
#include "segkit/image_io.hpp"
#include "segkit/report.hpp"

using namespace segkit;
using namespace segkit::train;
namespace fs = std::filesystem;
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

RunRecord record(const std::string& arch, const std::string& backbone, std::optional<double> miou, double acc,
                 double loss) {
  RunRecord r;
  r.architecture = arch;
  r.backbone = backbone;
  r.palette = "bdd22";
  r.train_loss = {0.9, 0.5};
  r.val_loss = {1.0, loss};
  r.val_accuracy = {0.5, acc};
  r.val_mean_iou = {0.1, miou};
  r.best_epoch = 2;
  metrics::MetricsReport m;
  m.mean_iou = miou;
  m.pixel_accuracy = acc;
  m.loss = loss;
  r.final_report = m;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

TrainConfig tiny_benchmark(const fs::path& out) {
  TrainConfig c;
  c.model.backbone.base_width = 4;
  c.model.decoder_width = 8;
  c.model.num_classes = 2;
  c.model.pyramid_bins = {1, 2, 4};
  c.batch_size = 4;
  c.epochs = 1;
  c.seed = 11;
  c.overlays = 2;
  c.out_dir = out.string();
  return c;
}

}  // namespace

TEST(Csv, ExactHeaderAndFormatting) {
  const auto csv = render_csv(report_rows({record("fpn", "efficientnet", 0.62574893, 0.8976, 0.0919)}));
  EXPECT_EQ(csv, "Model,Backbone,Mean IoU,Val_Accuracy,Loss\nFPN,EfficientNet,0.62574893,0.8976,0.0919\n");
}

TEST(Csv, MissingCellsAreDashes) {
  const auto rows = report_rows({record("fpn", "resnet", std::nullopt, 0.75, 0.2)});
  const auto csv = render_csv(rows);
  EXPECT_EQ(lines(csv)[1], "FPN,ResNet,\xE2\x80\x94,0.7500,0.2000");
  const auto text = render_text(rows, "bdd22");
  EXPECT_NE(text.find("FPN / ResNet: Mean IoU undefined"), std::string::npos) << text;
  EXPECT_NE(text.find("Palette: bdd22."), std::string::npos);
}

TEST(Csv, FailedRunsKeepTheirRow) {
  auto bad = record("pspnet", "vgg", 0.5, 0.5, 0.5);
  bad.error = "BinTooMany: 6 bins for a 4x4 map";
  const auto rows = report_rows({bad});
  EXPECT_EQ(lines(render_csv(rows))[1], "PSPNet,VGG,\xE2\x80\x94,\xE2\x80\x94,\xE2\x80\x94");
  EXPECT_NE(render_text(rows, "").find("PSPNet / VGG: FAILED: BinTooMany"), std::string::npos);
}

TEST(Rows, SortedByArchitectureThenFamily) {
  const auto rows = report_rows({record("deeplabv3plus", "vgg", 0.1, 0.1, 0.1), record("unet", "efficientnet", 0.2, 0.2, 0.2),
                                 record("unet", "vgg", 0.3, 0.3, 0.3), record("fpn", "resnet", 0.4, 0.4, 0.4)});
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0].model + "/" + rows[0].backbone, "Unet/VGG");
  EXPECT_EQ(rows[1].model + "/" + rows[1].backbone, "Unet/EfficientNet");
  EXPECT_EQ(rows[2].model, "FPN");
  EXPECT_EQ(rows[3].model, "DeepLabV3+");
  EXPECT_EQ(rows[0].train_loss, 0.5);  // train loss of the best epoch
}

TEST(Text, ColumnsAlign) {
  const auto text = render_text(report_rows({record("deeplabv3plus", "efficientnet", 0.5, 0.9, 0.1),
                                             record("fpn", "vgg", std::nullopt, 0.8, 0.2)}),
                                "bdd22");
  const auto ls = lines(text);
  ASSERT_GE(ls.size(), 4u);
  EXPECT_EQ(ls[0].rfind("Model", 0), 0u);
  EXPECT_NE(ls[0].find("Train_Loss"), std::string::npos);
  // "Mean IoU" starts in the same display column on every row
  auto col = [](const std::string& l, std::size_t byte) {
    std::size_t n = 0;
    for (std::size_t i = 0; i < byte; ++i)
      if ((static_cast<unsigned char>(l[i]) & 0xC0) != 0x80) ++n;
    return n;
  };
  const std::size_t c = col(ls[0], ls[0].find("Mean IoU"));
  // FPN sorts first
  ASSERT_NE(ls[2].find("\xE2\x80\x94"), std::string::npos);
  ASSERT_NE(ls[3].find("0.50000000"), std::string::npos);
  EXPECT_EQ(col(ls[2], ls[2].find("\xE2\x80\x94")), c);
  EXPECT_EQ(col(ls[3], ls[3].find("0.50000000")), c);
}

TEST(LossCurve, IsSvgWithBothSeries) {
  const auto svg = render_loss_curve(record("unet", "vgg", 0.3, 0.3, 0.3));
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  EXPECT_EQ(std::count(svg.begin(), svg.end(), '\n') > 5, true);
  std::size_t polylines = 0;
  for (auto p = svg.find("<polyline"); p != std::string::npos; p = svg.find("<polyline", p + 1)) ++polylines;
  EXPECT_EQ(polylines, 2u);
  EXPECT_NE(svg.find("</svg>"), std::string::npos);
}

TEST(Overlay, ThreePanels) {
  const auto palette = segkit::testing::two_class_palette();
  const Tensor img = Tensor::full({3, 2, 2}, 1.0);  // white
  const auto panel = overlay_panel(img, {0, 1, 1, 0}, {1, 1, 0, 0}, palette);
  EXPECT_EQ(panel.height, 2u);
  EXPECT_EQ(panel.width, 6u);
  EXPECT_EQ(panel.at(0, 0), (data::Rgb{255, 255, 255}));
  EXPECT_EQ(panel.at(0, 3), (data::Rgb{128, 64, 128}));  // truth 1
  EXPECT_EQ(panel.at(0, 2), (data::Rgb{0, 0, 0}));        // truth 0
  EXPECT_EQ(panel.at(0, 4), (data::Rgb{192, 160, 192}));  // prediction 1 over white
  EXPECT_EQ(panel.at(1, 5), (data::Rgb{128, 128, 128}));  // prediction 0 over white
  expect_error(Errc::kShapeMismatch, [&] { overlay_panel(img, {0}, {0, 0, 0, 0}, palette); });
}

TEST(Reports, RegenerationIsByteIdentical) {
  TempDir dir("regen");
  fs::create_directories(dir / "runs");
  const std::vector<RunRecord> runs = {record("unet", "vgg", 0.3, 0.9, 0.2), record("fpn", "vgg", std::nullopt, 0.8, 0.3)};
  for (const auto& r : runs) save_run_record(dir / "runs" / (run_stem(r) + ".json"), r);
  write_reports(runs, dir.path());
  const std::string csv = slurp(dir / "benchmark.csv"), txt = slurp(dir / "benchmark.txt");
  fs::remove(dir / "benchmark.csv");
  fs::remove(dir / "benchmark.txt");
  regenerate_reports(dir.path());
  EXPECT_EQ(slurp(dir / "benchmark.csv"), csv);
  EXPECT_EQ(slurp(dir / "benchmark.txt"), txt);

  TempDir empty("regen_empty");
  expect_error(Errc::kMissingFile, [&] { regenerate_reports(empty.path()); });
}

// A 2x2 matrix trained end to end: four rows, one FAILED, all artefacts.
TEST(Benchmark, TwoByTwoMatrix) {
  TempDir dir("bench");
  const data::InMemorySource data(segkit::testing::overfit_fixture());
  const auto palette = segkit::testing::two_class_palette();
  auto cfg = tiny_benchmark(dir / "out");
  // 32x32 input leaves a 4x4 map for pspnet; a 6-bin pyramid cannot fit
  cfg.model.pyramid_bins = {1, 2, 6};
  cfg.combinations = {{models::Architecture::kPspnet, models::Family::kMobilenet},
                      {models::Architecture::kUnet, models::Family::kVgg},
                      {models::Architecture::kUnet, models::Family::kMobilenet},
                      {models::Architecture::kPspnet, models::Family::kVgg},
                      {models::Architecture::kUnet, models::Family::kVgg}};
  segkit::testing::WarningCapture warnings;
  std::vector<std::string> started;
  BenchmarkProgress progress;
  progress.on_start = [&](const Combination& c) { started.push_back(to_string(c)); };
  const auto runs = benchmark(cfg, data, data, palette, progress);
  EXPECT_TRUE(warnings.contains("duplicate combination unet:vgg"));
  EXPECT_EQ(started.size(), 4u);
  ASSERT_EQ(runs.size(), 4u);

  const auto csv = lines(slurp(dir / "out" / "benchmark.csv"));
  ASSERT_EQ(csv.size(), 5u);
  EXPECT_EQ(csv[0], "Model,Backbone,Mean IoU,Val_Accuracy,Loss");
  EXPECT_EQ(csv[1].rfind("Unet,VGG,", 0), 0u);
  EXPECT_EQ(csv[2].rfind("Unet,MobileNet,", 0), 0u);
  EXPECT_EQ(csv[3], "PSPNet,VGG,\xE2\x80\x94,\xE2\x80\x94,\xE2\x80\x94");
  EXPECT_EQ(csv[4], "PSPNet,MobileNet,\xE2\x80\x94,\xE2\x80\x94,\xE2\x80\x94");
  EXPECT_NE(slurp(dir / "out" / "benchmark.txt").find("FAILED: BinTooMany"), std::string::npos);

  EXPECT_TRUE(fs::exists(dir / "out" / "runs" / "unet_vgg.json"));
  EXPECT_TRUE(fs::exists(dir / "out" / "runs" / "pspnet_vgg.json"));
  EXPECT_TRUE(fs::exists(dir / "out" / "curves" / "unet_mobilenet.svg"));
  EXPECT_FALSE(fs::exists(dir / "out" / "curves" / "pspnet_vgg.svg"));
  EXPECT_TRUE(fs::exists(dir / "out" / "overlays" / "unet_vgg_1.png"));
  EXPECT_FALSE(fs::exists(dir / "out" / "overlays" / "unet_vgg_2.png"));
  const auto overlay = data::read_image(dir / "out" / "overlays" / "unet_vgg_0.png");
  EXPECT_EQ(overlay.width, 96u);

  // same seed and config: same bytes; stale records do not leak in
  const std::string first = slurp(dir / "out" / "benchmark.csv");
  cfg.combinations.pop_back();
  cfg.combinations.pop_back();
  benchmark(cfg, data, data, palette);
  EXPECT_EQ(lines(slurp(dir / "out" / "benchmark.csv")).size(), 4u);
  cfg.combinations.push_back({models::Architecture::kPspnet, models::Family::kVgg});
  benchmark(cfg, data, data, palette);
  EXPECT_EQ(slurp(dir / "out" / "benchmark.csv"), first);
}

TEST(Benchmark, NeedsCombinationsAndOutDir) {
  const data::InMemorySource data(segkit::testing::overfit_fixture());
  TempDir dir("bench_err");
  auto cfg = tiny_benchmark(dir / "out");
  expect_error(Errc::kBadConfig, [&] { benchmark(cfg, data, data, segkit::testing::two_class_palette()); });
  cfg.combinations = {{models::Architecture::kUnet, models::Family::kVgg}};
  cfg.out_dir.clear();
  expect_error(Errc::kBadConfig, [&] { benchmark(cfg, data, data, segkit::testing::two_class_palette()); });
}
