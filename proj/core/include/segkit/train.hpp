#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "segkit/config.hpp"
#include "segkit/dataset.hpp"
#include "segkit/metrics.hpp"
#include "segkit/models.hpp"

namespace segkit::train {

struct RunRecord {
  Settings config;  // snapshot of to_settings()
  std::string architecture, backbone, palette;
  std::size_t parameter_count = 0;
  // One entry per completed epoch.
  std::vector<double> train_loss, val_loss, val_accuracy;
  std::vector<std::optional<double>> val_mean_iou;
  std::size_t best_epoch = 0;  // 1-based; 0 when no epoch finished
  double wall_seconds = 0.0;   // informational; never part of a report
  std::optional<metrics::MetricsReport> final_report;  // at the best epoch
  std::string error;  // non-empty for a failed run

  bool failed() const { return !error.empty(); }
};

std::string to_json(const RunRecord& record);
RunRecord run_record_from_json(std::string_view text);  // kBadFormat
void save_run_record(const std::filesystem::path& path, const RunRecord& record);
RunRecord load_run_record(const std::filesystem::path& path);

struct EvalOptions {
  std::size_t batch_size = 8;
  std::size_t resize_h = 0, resize_w = 0;
  double threshold = 0.5;
  losses::LossSpec loss;
  metrics::AbsentClassPolicy absent_class_policy = metrics::AbsentClassPolicy::kExclude;
  std::size_t data_classes = 0;  // palette size; 0 trusts the model
  static EvalOptions from(const TrainConfig& cfg, std::size_t data_classes = 0);
};

struct Evaluation {
  metrics::ConfusionMatrix confusion{2};
  metrics::MetricsReport report;
};

// One confusion matrix over the whole source, in inference mode.
// kClassCountMismatch when the data and model class counts differ,
// kEmptyMatrix for an empty source.
Evaluation evaluate(models::SegmentationModel& model, const data::SampleSource& source,
                    const EvalOptions& options);

// Parameters and buffers in registration order.
struct ModelState {
  std::vector<std::pair<std::string, Tensor>> parameters;
  std::vector<std::pair<std::string, std::vector<double>>> buffers;
};
ModelState capture_state(models::SegmentationModel& model);
void restore_state(models::SegmentationModel& model, const ModelState& state);  // kBadFormat

// Text header with the run settings, then one SEGKT1 blob per parameter and
// buffer.
void save_checkpoint(const std::filesystem::path& path, models::SegmentationModel& model,
                     const TrainConfig& cfg);
struct Checkpoint {
  TrainConfig config;
  std::unique_ptr<models::SegmentationModel> model;
};
Checkpoint load_checkpoint(const std::filesystem::path& path);  // kMissingFile / kBadFormat
// Copies every "encoder.*" parameter and buffer from a checkpoint of any
// architecture with the same backbone spec (transfer learning).
void load_encoder(models::SegmentationModel& model, const std::filesystem::path& path);

struct TrainOptions {
  std::size_t data_classes = 0;         // palette size; 0 trusts the model
  std::filesystem::path checkpoint;     // written at every new best epoch
  std::string palette_name;
  std::function<void(const RunRecord&)> on_epoch;
};

struct TrainResult {
  RunRecord record;
  std::unique_ptr<models::SegmentationModel> model;  // restored to the best epoch
};

// Adam at a constant learning rate, evaluated on val after every epoch. The
// best epoch has the highest val mean IoU, ties going to the lower val loss.
TrainResult train(const TrainConfig& cfg, const data::SampleSource& train_set,
                  const data::SampleSource& val_set, const TrainOptions& options = {});

}  // namespace segkit::train
