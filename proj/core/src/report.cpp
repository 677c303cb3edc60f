#include "segkit/report.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "segkit/autograd.hpp"
#include "segkit/error.hpp"
#include "segkit/image_io.hpp"

namespace segkit::train {

namespace fs = std::filesystem;

namespace {

std::size_t arch_rank(const std::string& name) {
  for (std::size_t i = 0; i < models::kAllArchitectures.size(); ++i)
    if (models::to_string(models::kAllArchitectures[i]) == name) return i;
  return models::kAllArchitectures.size();
}

std::size_t family_rank(const std::string& name) {
  for (std::size_t i = 0; i < models::kAllFamilies.size(); ++i)
    if (models::to_string(models::kAllFamilies[i]) == name) return i;
  return models::kAllFamilies.size();
}

std::string fixed(std::optional<double> v, int decimals) {
  if (!v) return std::string(kMissingCell);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, *v);
  return buf;
}

// Display width of UTF-8 text (counts code points).
std::size_t columns(const std::string& s) {
  std::size_t n = 0;
  for (unsigned char c : s)
    if ((c & 0xC0) != 0x80) ++n;
  return n;
}

std::string pad(const std::string& s, std::size_t width) {
  return s + std::string(width - std::min(width, columns(s)), ' ');
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(Errc::kMissingFile, "cannot write " + path.string());
  out << text;
}

}  // namespace

std::vector<ReportRow> report_rows(const std::vector<RunRecord>& runs) {
  std::vector<const RunRecord*> sorted;
  for (const auto& r : runs) sorted.push_back(&r);
  std::stable_sort(sorted.begin(), sorted.end(), [](const RunRecord* a, const RunRecord* b) {
    const auto ka = std::pair(arch_rank(a->architecture), family_rank(a->backbone));
    const auto kb = std::pair(arch_rank(b->architecture), family_rank(b->backbone));
    return ka < kb;
  });
  std::vector<ReportRow> rows;
  for (const RunRecord* r : sorted) {
    ReportRow row;
    try {
      row.model = std::string(display_name(models::parse_architecture(r->architecture)));
    } catch (const Error&) {
      row.model = r->architecture;
    }
    try {
      row.backbone = std::string(display_name(models::parse_family(r->backbone)));
    } catch (const Error&) {
      row.backbone = r->backbone;
    }
    row.error = r->error;
    if (!r->failed() && r->final_report) {
      row.mean_iou = r->final_report->mean_iou;
      row.val_accuracy = r->final_report->pixel_accuracy;
      row.loss = r->final_report->loss;
      if (r->best_epoch >= 1 && r->best_epoch <= r->train_loss.size()) {
        row.train_loss = r->train_loss[r->best_epoch - 1];
      }
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string render_csv(const std::vector<ReportRow>& rows) {
  std::string out = "Model,Backbone,Mean IoU,Val_Accuracy,Loss\n";
  for (const auto& r : rows) {
    out += csv_field(r.model) + "," + csv_field(r.backbone) + "," + fixed(r.mean_iou, 8) + "," +
           fixed(r.val_accuracy, 4) + "," + fixed(r.loss, 4) + "\n";
  }
  return out;
}

std::string render_text(const std::vector<ReportRow>& rows, const std::string& palette) {
  const std::vector<std::string> header = {"Model", "Backbone", "Mean IoU", "Val_Accuracy", "Loss", "Train_Loss"};
  std::vector<std::vector<std::string>> cells;
  for (const auto& r : rows) {
    cells.push_back({r.model, r.backbone, fixed(r.mean_iou, 8), fixed(r.val_accuracy, 4), fixed(r.loss, 4),
                     fixed(r.train_loss, 4)});
  }
  std::vector<std::size_t> width(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) {
    width[c] = columns(header[c]);
    for (const auto& row : cells) width[c] = std::max(width[c], columns(row[c]));
  }
  auto line = [&](const std::vector<std::string>& row) {
    std::string s;
    for (std::size_t c = 0; c < row.size(); ++c) {
      s += c + 1 < row.size() ? pad(row[c], width[c]) + "  " : row[c];
    }
    return s + "\n";
  };
  std::string out = line(header);
  std::size_t total = 0;
  for (auto w : width) total += w + 2;
  out += std::string(total - 2, '-') + "\n";
  for (const auto& row : cells) out += line(row);

  out += "\nNotes:\n";
  out += "  Loss is the validation loss and Val_Accuracy the pixel accuracy, both at the\n";
  out += "  epoch with the best validation mean IoU; Train_Loss is the training loss of\n";
  out += "  that epoch.\n";
  if (!palette.empty()) out += "  Palette: " + palette + ".\n";
  for (const auto& r : rows) {
    const std::string who = "  " + r.model + " / " + r.backbone + ": ";
    if (!r.error.empty()) {
      out += who + "FAILED: " + r.error + "\n";
    } else if (!r.mean_iou) {
      out += who + "Mean IoU undefined (no class present in predictions or ground truth)\n";
    }
  }
  return out;
}

std::string render_loss_curve(const RunRecord& run) {
  constexpr double W = 480, H = 300, L = 56, R = 16, T = 28, B = 40;
  const std::size_t n = run.train_loss.size();
  double hi = 0;
  for (double v : run.train_loss) hi = std::max(hi, v);
  for (double v : run.val_loss) hi = std::max(hi, v);
  if (hi <= 0) hi = 1;
  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return std::string(buf);
  };
  auto x_at = [&](std::size_t i) { return L + (n > 1 ? (W - L - R) * static_cast<double>(i) / (n - 1) : 0.0); };
  auto y_at = [&](double v) { return T + (H - T - B) * (1.0 - v / hi); };
  auto poly = [&](const std::vector<double>& ys, const char* colour) {
    std::string pts;
    for (std::size_t i = 0; i < ys.size(); ++i) pts += (i ? " " : "") + num(x_at(i)) + "," + num(y_at(ys[i]));
    return "  <polyline fill=\"none\" stroke=\"" + std::string(colour) + "\" stroke-width=\"2\" points=\"" + pts +
           "\"/>\n";
  };
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
    << ' ' << H << "\">\n";
  s << "  <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "  <text x=\"" << L << "\" y=\"18\" font-family=\"sans-serif\" font-size=\"13\">" << run.architecture << " / "
    << run.backbone << " loss</text>\n";
  s << "  <line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
    << "\" stroke=\"black\"/>\n";
  s << "  <line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double v = hi * k / 4.0;
    s << "  <text x=\"" << L - 6 << "\" y=\"" << num(y_at(v) + 4)
      << "\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">" << fixed(v, 3) << "</text>\n";
  }
  s << "  <text x=\"" << (W + L) / 2 << "\" y=\"" << H - 10
    << "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">epoch (1.." << n << ")</text>\n";
  if (n > 0) {
    s << poly(run.train_loss, "#1f77b4") << poly(run.val_loss, "#d62728");
  }
  s << "  <text x=\"" << W - R - 120 << "\" y=\"" << T + 12
    << "\" font-family=\"sans-serif\" font-size=\"11\" fill=\"#1f77b4\">train</text>\n";
  s << "  <text x=\"" << W - R - 60 << "\" y=\"" << T + 12
    << "\" font-family=\"sans-serif\" font-size=\"11\" fill=\"#d62728\">val</text>\n";
  s << "</svg>\n";
  return s.str();
}

data::RgbImage overlay_panel(const Tensor& image_chw, const std::vector<int>& truth,
                             const std::vector<int>& prediction, const data::LabelPalette& palette) {
  const data::RgbImage img = data::tensor_to_image(image_chw);
  const std::size_t h = img.height, w = img.width;
  if (truth.size() != h * w || prediction.size() != h * w) {
    fail(Errc::kShapeMismatch, "overlay label maps do not match the image");
  }
  data::RgbImage out{h, 3 * w, std::vector<std::uint8_t>(h * 3 * w * 3)};
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t i = y * w + x;
      const data::Rgb px = img.at(y, x), t = palette.color(truth[i]), p = palette.color(prediction[i]);
      auto put = [&](std::size_t panel, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
        std::uint8_t* d = &out.pixels[(y * 3 * w + panel * w + x) * 3];
        d[0] = r, d[1] = g, d[2] = b;
      };
      auto mix = [](std::uint8_t a, std::uint8_t b) { return static_cast<std::uint8_t>((a + b + 1) / 2); };
      put(0, px.r, px.g, px.b);
      put(1, t.r, t.g, t.b);
      put(2, mix(px.r, p.r), mix(px.g, p.g), mix(px.b, p.b));
    }
  }
  return out;
}

std::string run_stem(const RunRecord& run) { return run.architecture + "_" + run.backbone; }

std::pair<fs::path, fs::path> write_reports(const std::vector<RunRecord>& runs, const fs::path& dir) {
  fs::create_directories(dir);
  const auto rows = report_rows(runs);
  std::string palette;
  for (const auto& r : runs) {
    if (!r.palette.empty()) {
      palette = r.palette;
      break;
    }
  }
  const fs::path csv = dir / "benchmark.csv", txt = dir / "benchmark.txt";
  write_text(csv, render_csv(rows));
  write_text(txt, render_text(rows, palette));
  return {csv, txt};
}

std::vector<RunRecord> regenerate_reports(const fs::path& dir) {
  const fs::path runs_dir = dir / "runs";
  if (!fs::is_directory(runs_dir)) fail(Errc::kMissingFile, "no run records in " + runs_dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(runs_dir))
    if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) fail(Errc::kMissingFile, "no run records in " + runs_dir.string());
  std::vector<RunRecord> runs;
  for (const auto& f : files) runs.push_back(load_run_record(f));
  write_reports(runs, dir);
  return runs;
}

std::vector<RunRecord> benchmark(const TrainConfig& cfg, const data::SampleSource& train_set,
                                 const data::SampleSource& val_set, const data::LabelPalette& palette,
                                 const BenchmarkProgress& progress) {
  if (cfg.combinations.empty()) fail(Errc::kBadConfig, "benchmark needs at least one architecture:backbone pair");
  if (cfg.out_dir.empty()) fail(Errc::kBadConfig, "benchmark needs out_dir");
  const fs::path dir(cfg.out_dir);
  for (const char* sub : {"runs", "curves", "overlays"}) fs::create_directories(dir / sub);
  // Records of an earlier benchmark in the same directory would leak into the
  // re-rendered tables.
  for (const auto& e : fs::directory_iterator(dir / "runs"))
    if (e.is_regular_file() && e.path().extension() == ".json") fs::remove(e.path());

  std::vector<Combination> combos;
  for (const auto& c : cfg.combinations) {
    if (std::find(combos.begin(), combos.end(), c) != combos.end()) {
      warn("duplicate combination " + to_string(c) + " skipped");
      continue;
    }
    combos.push_back(c);
  }

  std::vector<RunRecord> runs;
  for (const auto& combo : combos) {
    if (progress.on_start) progress.on_start(combo);
    TrainConfig run_cfg = cfg;
    run_cfg.model.architecture = combo.architecture;
    run_cfg.model.backbone.family = combo.family;
    RunRecord rec;
    std::unique_ptr<models::SegmentationModel> model;
    try {
      TrainOptions opts;
      opts.data_classes = palette.size();
      opts.palette_name = palette.name();
      auto result = train(run_cfg, train_set, val_set, opts);
      rec = std::move(result.record);
      model = std::move(result.model);
    } catch (const std::exception& e) {
      rec = RunRecord{};
      rec.config = to_settings(run_cfg);
      rec.architecture = std::string(models::to_string(combo.architecture));
      rec.backbone = std::string(models::to_string(combo.family));
      rec.palette = palette.name();
      const auto* err = dynamic_cast<const Error*>(&e);
      rec.error = err ? std::string(segkit::to_string(err->code())) + ": " + err->detail() : e.what();
    }
    const std::string stem = run_stem(rec);
    save_run_record(dir / "runs" / (stem + ".json"), rec);
    if (!rec.failed()) {
      write_text(dir / "curves" / (stem + ".svg"), render_loss_curve(rec));
      if (model && cfg.overlays > 0) {
        NoGradGuard no_grad;
        data::BatchOptions bo;
        bo.batch_size = 1;
        bo.resize_h = cfg.resize_h;
        bo.resize_w = cfg.resize_w;
        bo.shuffle = false;
        data::BatchIterator it(val_set, palette.size(), bo);
        for (std::size_t i = 0; i < cfg.overlays; ++i) {
          auto batch = it.next();
          if (!batch) break;
          const auto pred = model->predict(batch->images);
          const std::size_t h = batch->images.dim(2), w = batch->images.dim(3);
          const Tensor chw = Tensor::create({3, h, w}, batch->images.data());
          data::write_png(dir / "overlays" / (stem + "_" + std::to_string(i) + ".png"),
                          overlay_panel(chw, batch->labels, pred.labels, palette));
        }
      }
    }
    if (progress.on_finish) progress.on_finish(rec);
    runs.push_back(std::move(rec));
  }
  // Render from the persisted records so that `report` reproduces the bytes.
  return regenerate_reports(dir);
}

}  // namespace segkit::train
