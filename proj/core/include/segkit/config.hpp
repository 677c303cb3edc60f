#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "segkit/dataset.hpp"
#include "segkit/losses.hpp"
#include "segkit/metrics.hpp"
#include "segkit/models.hpp"

// Run configuration: defaults, the flat "key = value" file format and
// per-key overrides.
namespace segkit::train {

struct Combination {
  models::Architecture architecture = models::Architecture::kUnet;
  models::Family family = models::Family::kResnet;
  bool operator==(const Combination&) const = default;
};

struct TrainConfig {
  models::ModelConfig model;
  losses::LossSpec loss;
  double learning_rate = 1e-4;
  std::size_t batch_size = 8;
  std::size_t epochs = 50;
  std::uint64_t seed = 0;
  bool freeze_encoder = false;
  double eval_threshold = 0.5;
  std::size_t resize_h = 0, resize_w = 0;  // 0 x 0: native size
  metrics::AbsentClassPolicy absent_class_policy = metrics::AbsentClassPolicy::kExclude;
  data::UnknownColorPolicy unknown_color = data::UnknownColorPolicy::kMapToZero;
  std::string palette;  // empty: the manifest's palette
  std::string encoder_checkpoint;  // initial encoder weights, optional

  // Files and the benchmark matrix; not part of the model.
  std::string train_manifest, val_manifest, out_dir;
  std::vector<Combination> combinations;
  std::size_t overlays = 8;

  // kBadConfig (lr <= 0, epochs == 0, ...); model and loss errors propagate.
  void validate() const;
};

using Settings = std::vector<std::pair<std::string, std::string>>;

// Lines "key = value"; '#' starts a comment; lists are comma-separated.
// kMissingFile / kBadConfig with the line number.
Settings parse_settings(std::string_view text, std::string_view origin = "<config>");
Settings read_settings(const std::filesystem::path& path);

// kBadConfig for unknown keys or malformed values.
void apply_setting(TrainConfig& cfg, std::string_view key, std::string_view value);
void apply_settings(TrainConfig& cfg, const Settings& settings);

// Every key with its current value, in a fixed order; parse_settings of the
// rendered text reproduces the configuration.
Settings to_settings(const TrainConfig& cfg);
std::string render_settings(const Settings& settings);

// "unet:resnet"
std::string to_string(const Combination& c);
Combination parse_combination(std::string_view text);  // kBadConfig

// Report-style names ("Unet", "ResNet").
std::string_view display_name(models::Architecture arch);
std::string_view display_name(models::Family family);

}  // namespace segkit::train
