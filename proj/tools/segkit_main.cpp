// segkit: prepare data, train, evaluate and benchmark segmentation models.
//
// Exit status: 0 ok, 1 usage or configuration error, 2 data error,
// 3 numeric failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "segkit/config.hpp"
#include "segkit/data.hpp"
#include "segkit/dataset.hpp"
#include "segkit/error.hpp"
#include "segkit/image_io.hpp"
#include "segkit/report.hpp"
#include "segkit/selftest.hpp"
#include "segkit/train.hpp"

namespace fs = std::filesystem;
using namespace segkit;

namespace {

constexpr int kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitNumeric = 3;

int exit_code(Errc code) {
  switch (code) {
    case Errc::kBadConfig:
    case Errc::kBadSpec:
    case Errc::kBadCoefficients:
    case Errc::kBadThreshold:
      return kExitUsage;
    case Errc::kNumericFailure:
    case Errc::kNotNormalized:
      return kExitNumeric;
    default:
      return kExitData;
  }
}

// Palette named by the config, else by the manifest. Relative palette files
// are looked up next to the manifest first.
data::LabelPalette palette_for(const train::TrainConfig& cfg, const data::DatasetManifest& m) {
  const std::string& name = cfg.palette.empty() ? m.palette : cfg.palette;
  if (name != "bdd22" && name != "eval19" && !fs::path(name).is_absolute() && !fs::exists(name)) {
    const fs::path beside = m.source.parent_path() / name;
    if (fs::exists(beside)) return data::LabelPalette::load(beside);
  }
  return data::LabelPalette::resolve(name);
}

void report_duplicates(const data::LabelPalette& p) {
  for (auto [winner, shadowed] : p.duplicates()) {
    warn("palette '" + p.name() + "': class " + std::to_string(shadowed) + " (" + p.entries()[shadowed].name +
         ") shares " + data::rgb_str(p.entries()[shadowed].rgb) + " with class " + std::to_string(winner) +
         " and is unreachable from colour masks");
  }
}

void print_report(const metrics::MetricsReport& r, const data::LabelPalette* palette) {
  auto opt = [](const std::optional<double>& v) {
    if (!v) return std::string("—");
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", *v);
    return std::string(buf);
  };
  std::cout << "loss            " << opt(r.loss) << "\n"
            << "pixel_accuracy  " << opt(r.pixel_accuracy) << "\n"
            << "mean_iou        " << opt(r.mean_iou) << "\n"
            << "f1_macro        " << opt(r.f1_macro) << "\n"
            << "iou_score       " << opt(r.iou_score) << "\n"
            << "f_score         " << opt(r.f_score) << "\n";
  for (std::size_t c = 0; c < r.per_class_iou.size(); ++c) {
    const std::string name = palette && c < palette->size() ? palette->entries()[c].name : std::to_string(c);
    std::printf("  iou[%2zu] %-16s %s\n", c, name.c_str(), opt(r.per_class_iou[c]).c_str());
  }
}

// Options shared by train and benchmark: a run-config file, generic
// --set key=value overrides and a few named shortcuts. Later sources win:
// defaults < file < --set < named flags.
struct ConfigArgs {
  std::string file;
  std::vector<std::string> sets;
  std::map<std::string, std::string> flags;

  void attach(CLI::App* app) {
    app->add_option("-c,--config", file, "Run-config file (key = value lines)");
    app->add_option("--set", sets, "Override one setting, key=value (repeatable)");
    for (const auto& [flag, key, help] : std::vector<std::tuple<std::string, std::string, std::string>>{
             {"--epochs", "epochs", "Training epochs"},
             {"--lr", "learning_rate", "Adam learning rate"},
             {"--batch-size", "batch_size", "Mini-batch size"},
             {"--seed", "seed", "Seed for initialisation and shuffling"},
             {"--architecture", "architecture", "unet|fpn|linknet|pspnet|deeplabv3plus"},
             {"--backbone", "backbone", "resnet|vgg|densenet|inception|mobilenet|efficientnet"},
             {"--train", "train_manifest", "Training manifest"},
             {"--val", "val_manifest", "Validation manifest"},
             {"--out", "out_dir", "Output directory"},
             {"--palette", "palette", "bdd22, eval19 or a palette file"},
             {"--resize-to", "resize_to", "HxW, multiples of 32"},
         }) {
      app->add_option_function<std::string>(
          flag, [this, key = key](const std::string& v) { flags[key] = v; }, help);
    }
    app->add_option_function<std::vector<std::string>>(
        "--combination", [this](const std::vector<std::string>& v) {
          std::string joined;
          for (const auto& s : v) joined += (joined.empty() ? "" : ",") + s;
          flags["combinations"] = joined;
        },
        "architecture:backbone pairs (benchmark)");
    app->add_flag_function(
        "--freeze-encoder", [this](std::int64_t) { flags["freeze_encoder"] = "true"; }, "Freeze encoder weights");
  }

  // Returns the config and whether num_classes was given explicitly.
  std::pair<train::TrainConfig, bool> resolve() const {
    train::Settings settings;
    if (!file.empty()) settings = train::read_settings(file);
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) fail(Errc::kBadConfig, "--set expects key=value, got '" + s + "'");
      settings.emplace_back(s.substr(0, eq), s.substr(eq + 1));
    }
    for (const auto& kv : flags) settings.push_back(kv);
    train::TrainConfig cfg;
    train::apply_settings(cfg, settings);
    bool explicit_classes = false;
    for (const auto& kv : settings) explicit_classes |= kv.first == "num_classes";
    return {cfg, explicit_classes};
  }
};

struct Data {
  data::DatasetManifest train_manifest, val_manifest;
  std::optional<data::LabelPalette> palette;
  std::unique_ptr<data::ManifestSource> train, val;
};

Data load_data(train::TrainConfig& cfg, bool explicit_classes) {
  if (cfg.train_manifest.empty() || cfg.val_manifest.empty()) {
    fail(Errc::kBadConfig, "train_manifest and val_manifest are required");
  }
  Data d;
  d.train_manifest = data::load_manifest(cfg.train_manifest);
  d.val_manifest = data::load_manifest(cfg.val_manifest);
  const std::vector<data::DatasetManifest> both = {d.train_manifest, d.val_manifest};
  data::validate_splits(both);
  d.palette = palette_for(cfg, d.train_manifest);
  report_duplicates(*d.palette);
  if (!explicit_classes) cfg.model.num_classes = d.palette->size();
  d.train = std::make_unique<data::ManifestSource>(d.train_manifest, *d.palette, cfg.unknown_color);
  d.val = std::make_unique<data::ManifestSource>(d.val_manifest, *d.palette, cfg.unknown_color);
  return d;
}

int cmd_prepare(const std::string& palette_name, const std::vector<std::string>& manifests,
                const std::string& unknown, const std::string& write_palette) {
  std::optional<data::LabelPalette> palette;
  if (!palette_name.empty()) palette = data::LabelPalette::resolve(palette_name);
  std::vector<data::DatasetManifest> loaded;
  for (const auto& m : manifests) loaded.push_back(data::load_manifest(m));
  if (!palette && !loaded.empty()) palette = palette_for(train::TrainConfig{}, loaded.front());
  if (!palette) palette = data::LabelPalette::bdd22();
  report_duplicates(*palette);
  std::cout << "palette " << palette->name() << ": " << palette->size() << " classes\n";
  if (!write_palette.empty()) palette->save(write_palette);

  const auto policy = data::parse_unknown_color_policy(unknown);
  bool ok = true;
  for (const auto& m : loaded) {
    std::vector<std::uint64_t> hist(palette->size(), 0);
    std::uint64_t pixels = 0, unknown_pixels = 0;
    for (const auto& pair : m.pairs) {
      data::MaskReport rep;
      const auto mask = data::read_image(pair.mask);
      const auto image = data::read_image(pair.image);
      if (image.height != mask.height || image.width != mask.width) {
        fail(Errc::kShapeMismatch, pair.image.string() + " and " + pair.mask.string() + " differ in size");
      }
      data::LabelMap labels;
      try {
        labels = data::rgb_mask_to_labels(mask, *palette, policy, &rep);
      } catch (const Error& e) {
        fail(e.code(), pair.mask.string() + ": " + e.detail());
      }
      unknown_pixels += rep.unknown_pixels;
      const auto h = data::class_histogram(labels, palette->size());
      for (std::size_t c = 0; c < h.size(); ++c) hist[c] += h[c];
      pixels += labels.labels.size();
    }
    std::cout << "\n" << m.source.string() << ": dataset=" << (m.dataset.empty() ? "-" : m.dataset)
              << " split=" << data::to_string(m.split) << " pairs=" << m.pairs.size() << "\n";
    std::cout << "  pixels " << pixels << ", unmatched colours " << unknown_pixels << "\n";
    for (std::size_t c = 0; c < hist.size(); ++c) {
      if (hist[c] == 0) continue;
      std::printf("  %2zu %-16s %12llu  %6.2f%%\n", c, palette->entries()[c].name.c_str(),
                  static_cast<unsigned long long>(hist[c]), pixels ? 100.0 * hist[c] / pixels : 0.0);
    }
  }
  const auto splits = data::validate_splits(loaded);
  for (const auto& c : splits.checks) {
    if (!c.expected) continue;
    std::cout << (c.ok ? "ok      " : "MISMATCH") << " " << c.dataset << " " << data::to_string(c.split) << ": "
              << c.pairs << " pairs (expected " << *c.expected << ")\n";
    ok &= c.ok;
  }
  return ok ? kExitOk : kExitData;
}

int cmd_train(const ConfigArgs& args) {
  auto [cfg, explicit_classes] = args.resolve();
  Data d = load_data(cfg, explicit_classes);
  if (cfg.out_dir.empty()) cfg.out_dir = "segkit-run";
  const fs::path out(cfg.out_dir);
  fs::create_directories(out);
  train::TrainOptions opts;
  opts.data_classes = d.palette->size();
  opts.palette_name = d.palette->name();
  opts.checkpoint = out / "best.ckpt";
  opts.on_epoch = [](const train::RunRecord& r) {
    const std::size_t e = r.train_loss.size() - 1;
    std::fprintf(stderr, "epoch %zu  train_loss %.6f  val_loss %.6f  val_acc %.4f  val_miou %s\n", e + 1,
                 r.train_loss[e], r.val_loss[e], r.val_accuracy[e],
                 r.val_mean_iou[e] ? std::to_string(*r.val_mean_iou[e]).c_str() : "—");
  };
  auto result = train::train(cfg, *d.train, *d.val, opts);
  train::save_run_record(out / "run.json", result.record);
  std::ofstream(out / "loss.svg") << train::render_loss_curve(result.record);
  std::cout << "best epoch " << result.record.best_epoch << " (checkpoint " << opts.checkpoint.string() << ")\n";
  print_report(*result.record.final_report, &*d.palette);
  return kExitOk;
}

int cmd_evaluate(const std::string& checkpoint, const std::string& manifest_path, const std::string& palette_name,
                 std::size_t batch_size, double threshold, const std::string& json_out) {
  auto ck = train::load_checkpoint(checkpoint);
  const auto m = data::load_manifest(manifest_path);
  train::TrainConfig pcfg;
  pcfg.palette = palette_name.empty() ? ck.config.palette : palette_name;
  const auto palette = palette_for(pcfg, m);
  const data::ManifestSource src(m, palette, ck.config.unknown_color);
  auto opts = train::EvalOptions::from(ck.config, palette.size());
  if (batch_size) opts.batch_size = batch_size;
  if (threshold > 0) opts.threshold = threshold;
  const auto ev = train::evaluate(*ck.model, src, opts);
  print_report(ev.report, &palette);
  if (!json_out.empty()) {
    train::RunRecord rec;
    rec.config = train::to_settings(ck.config);
    rec.architecture = std::string(models::to_string(ck.config.model.architecture));
    rec.backbone = std::string(models::to_string(ck.config.model.backbone.family));
    rec.palette = palette.name();
    rec.parameter_count = ck.model->parameter_count();
    rec.final_report = ev.report;
    train::save_run_record(json_out, rec);
  }
  return kExitOk;
}

int cmd_benchmark(const ConfigArgs& args) {
  auto [cfg, explicit_classes] = args.resolve();
  if (cfg.combinations.empty()) {
    std::cerr << "benchmark: no architecture:backbone combinations given (use --combination or "
                 "'combinations = ...')\n";
    return kExitUsage;
  }
  Data d = load_data(cfg, explicit_classes);
  if (cfg.out_dir.empty()) cfg.out_dir = "segkit-benchmark";
  train::BenchmarkProgress progress;
  progress.on_start = [](const train::Combination& c) { std::fprintf(stderr, "[%s] training\n", train::to_string(c).c_str()); };
  progress.on_finish = [](const train::RunRecord& r) {
    if (r.failed()) std::fprintf(stderr, "[%s] FAILED: %s\n", train::run_stem(r).c_str(), r.error.c_str());
  };
  train::benchmark(cfg, *d.train, *d.val, *d.palette, progress);
  std::ifstream txt(fs::path(cfg.out_dir) / "benchmark.txt");
  std::cout << txt.rdbuf();
  return kExitOk;
}

int cmd_report(const std::string& dir) {
  train::regenerate_reports(dir);
  std::ifstream txt(fs::path(dir) / "benchmark.txt");
  std::cout << txt.rdbuf();
  return kExitOk;
}

int cmd_selftest(std::size_t seeds) {
  bool ok = true;
  for (const auto& r : selftest::run_all(seeds)) {
    std::printf("%s  %-28s %s\n", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.detail.c_str());
    ok &= r.passed;
  }
  return ok ? kExitOk : kExitNumeric;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"segkit: semantic segmentation encoder-decoder toolkit"};
  app.require_subcommand(1);

  auto* prepare = app.add_subcommand("prepare", "Validate a palette and manifests; print class histograms");
  std::string palette_name, unknown = "map_to_zero", write_palette;
  std::vector<std::string> manifests;
  prepare->add_option("-p,--palette", palette_name, "bdd22, eval19 or a palette file");
  prepare->add_option("-m,--manifest", manifests, "Manifest files (repeatable)");
  prepare->add_option("--unknown-color", unknown, "strict | map_to_zero");
  prepare->add_option("--write-palette", write_palette, "Save the palette as an 'id name r g b' file");

  auto* train_cmd = app.add_subcommand("train", "Train one model");
  ConfigArgs train_args;
  train_args.attach(train_cmd);

  auto* eval_cmd = app.add_subcommand("evaluate", "Evaluate a checkpoint on a manifest");
  std::string checkpoint, eval_manifest, eval_palette, eval_json;
  std::size_t eval_batch = 0;
  double eval_threshold = 0;
  eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint written by train")->required();
  eval_cmd->add_option("-m,--manifest", eval_manifest, "Manifest to evaluate")->required();
  eval_cmd->add_option("-p,--palette", eval_palette, "Palette override");
  eval_cmd->add_option("--batch-size", eval_batch, "Batch size (default: the checkpoint's)");
  eval_cmd->add_option("--threshold", eval_threshold, "Threshold for iou_score / f_score");
  eval_cmd->add_option("--json", eval_json, "Also write the report as a run record");

  auto* bench = app.add_subcommand("benchmark", "Train and tabulate an architecture x backbone matrix");
  ConfigArgs bench_args;
  bench_args.attach(bench);

  auto* report = app.add_subcommand("report", "Re-render benchmark tables from saved run records");
  std::string report_dir;
  report->add_option("dir", report_dir, "Benchmark output directory")->required();

  auto* self = app.add_subcommand("selftest", "Run gradient-check and oracle suites");
  std::size_t seeds = 10;
  self->add_option("--seeds", seeds, "Random seeds per gradient case");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*prepare) return cmd_prepare(palette_name, manifests, unknown, write_palette);
    if (*train_cmd) return cmd_train(train_args);
    if (*eval_cmd) return cmd_evaluate(checkpoint, eval_manifest, eval_palette, eval_batch, eval_threshold, eval_json);
    if (*bench) return cmd_benchmark(bench_args);
    if (*report) return cmd_report(report_dir);
    if (*self) return cmd_selftest(seeds);
  } catch (const Error& e) {
    std::cerr << "segkit: " << e.what() << "\n";
    return exit_code(e.code());
  } catch (const std::exception& e) {
    std::cerr << "segkit: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}
