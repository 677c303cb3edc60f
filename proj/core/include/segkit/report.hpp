#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "segkit/config.hpp"
#include "segkit/data.hpp"
#include "segkit/dataset.hpp"
#include "segkit/train.hpp"

// The model x backbone matrix and its tables.
namespace segkit::train {

inline constexpr std::string_view kMissingCell = "—";  // em dash

struct ReportRow {
  std::string model, backbone;  // display names
  std::optional<double> mean_iou, val_accuracy, loss, train_loss;
  std::string error;  // FAILED runs
};

// Sorted by architecture, then backbone family, in table order; runs of the
// same combination keep their relative order.
std::vector<ReportRow> report_rows(const std::vector<RunRecord>& runs);

// Columns exactly "Model,Backbone,Mean IoU,Val_Accuracy,Loss". Mean IoU has 8
// decimals, the others 4; missing values are an em dash.
std::string render_csv(const std::vector<ReportRow>& rows);
// Aligned table with an extra Train_Loss column and a notes section that
// flags every missing cell.
std::string render_text(const std::vector<ReportRow>& rows, const std::string& palette);

// Per-epoch train/val loss polyline chart.
std::string render_loss_curve(const RunRecord& run);

// Image | ground truth | prediction blended over the image.
data::RgbImage overlay_panel(const Tensor& image_chw, const std::vector<int>& truth,
                             const std::vector<int>& prediction, const data::LabelPalette& palette);

// "<architecture>_<backbone>"
std::string run_stem(const RunRecord& run);

// Writes benchmark.csv and benchmark.txt into dir; returns their paths.
std::pair<std::filesystem::path, std::filesystem::path> write_reports(
    const std::vector<RunRecord>& runs, const std::filesystem::path& dir);

// Loads dir/runs/*.json (name order) and re-renders the reports in dir.
std::vector<RunRecord> regenerate_reports(const std::filesystem::path& dir);

struct BenchmarkProgress {
  std::function<void(const Combination&)> on_start;
  std::function<void(const RunRecord&)> on_finish;
};

// Trains every combination of cfg.combinations with the same data and seed.
// A failing combination becomes a FAILED row; the rest continue. Writes
// benchmark.csv, benchmark.txt, runs/, curves/ and overlays/ into
// cfg.out_dir. kBadConfig without combinations.
std::vector<RunRecord> benchmark(const TrainConfig& cfg, const data::SampleSource& train_set,
                                 const data::SampleSource& val_set, const data::LabelPalette& palette,
                                 const BenchmarkProgress& progress = {});

}  // namespace segkit::train
