#include "segkit/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "segkit/error.hpp"

namespace segkit::train {

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::vector<std::string_view> split_list(std::string_view value) {
  std::vector<std::string_view> out;
  if (trim(value).empty()) return out;
  std::size_t start = 0;
  while (true) {
    const auto comma = value.find(',', start);
    out.push_back(trim(value.substr(start, comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, std::string_view want) {
  fail(Errc::kBadConfig, std::string(key) + ": '" + std::string(value) + "' is not " + std::string(want));
}

std::uint64_t parse_u64(std::string_view key, std::string_view v) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc{} || ptr != v.data() + v.size()) bad_value(key, v, "a non-negative integer");
  return out;
}

std::size_t parse_size(std::string_view key, std::string_view v) {
  return static_cast<std::size_t>(parse_u64(key, v));
}

double parse_double(std::string_view key, std::string_view v) {
  double out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc{} || ptr != v.data() + v.size()) bad_value(key, v, "a number");
  return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  bad_value(key, v, "a boolean");
}

std::vector<std::size_t> parse_size_list(std::string_view key, std::string_view v) {
  std::vector<std::size_t> out;
  for (auto item : split_list(v)) out.push_back(parse_size(key, item));
  return out;
}

std::string fmt_double(double v) {
  // Shortest text that parses back to the same double.
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

template <class T, class F>
std::string join(const std::vector<T>& xs, F f) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ",";
    out += f(xs[i]);
  }
  return out;
}

// Same error code, prefixed with the offending key.
template <class F>
auto with_key(std::string_view key, F f) {
  try {
    return f();
  } catch (const Error& e) {
    fail(e.code(), std::string(key) + ": " + e.detail());
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate > 0)) fail(Errc::kBadConfig, "learning_rate must be > 0");
  if (epochs == 0) fail(Errc::kBadConfig, "epochs must be >= 1");
  if (batch_size == 0) fail(Errc::kBadConfig, "batch_size must be >= 1");
  if (!(eval_threshold > 0 && eval_threshold < 1)) fail(Errc::kBadConfig, "eval_threshold must be in (0, 1)");
  if ((resize_h == 0) != (resize_w == 0)) fail(Errc::kBadConfig, "resize_to needs both height and width");
  if (resize_h % 32 != 0 || resize_w % 32 != 0) {
    fail(Errc::kInputNotDivisible, "resize_to must be a multiple of 32");
  }
  model.validate();
  loss.validate(model.num_classes);
}

Settings parse_settings(std::string_view text, std::string_view origin) {
  Settings out;
  std::size_t line_no = 0, start = 0;
  while (start <= text.size()) {
    const auto nl = text.find('\n', start);
    std::string_view line = text.substr(start, nl == std::string_view::npos ? std::string_view::npos : nl - start);
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (!line.empty()) {
      const auto eq = line.find('=');
      if (eq == std::string_view::npos || trim(line.substr(0, eq)).empty()) {
        fail(Errc::kBadConfig, std::string(origin) + ":" + std::to_string(line_no) + ": expected 'key = value'");
      }
      out.emplace_back(std::string(trim(line.substr(0, eq))), std::string(trim(line.substr(eq + 1))));
    }
    if (nl == std::string_view::npos) break;
    start = nl + 1;
  }
  return out;
}

Settings read_settings(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(Errc::kMissingFile, "run config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_settings(ss.str(), path.string());
}

void apply_setting(TrainConfig& cfg, std::string_view key, std::string_view value) {
  auto& m = cfg.model;
  auto& b = m.backbone;
  const std::string_view v = trim(value);
  if (key == "architecture") {
    m.architecture = with_key(key, [&] { return models::parse_architecture(v); });
  } else if (key == "backbone") {
    b.family = with_key(key, [&] { return models::parse_family(v); });
  } else if (key == "base_width") {
    b.base_width = parse_size(key, v);
  } else if (key == "depth_per_stage") {
    b.depth_per_stage = parse_size_list(key, v);
  } else if (key == "compound_phi") {
    b.compound_phi = parse_double(key, v);
  } else if (key == "compound_coefficients") {
    const auto items = split_list(v);
    if (items.size() != 3) bad_value(key, v, "three numbers alpha,beta,gamma");
    b.coefficients = {parse_double(key, items[0]), parse_double(key, items[1]), parse_double(key, items[2])};
  } else if (key == "num_classes") {
    m.num_classes = parse_size(key, v);
  } else if (key == "decoder_width") {
    m.decoder_width = parse_size(key, v);
  } else if (key == "output_stride") {
    m.output_stride = parse_size(key, v);
  } else if (key == "pyramid_bins") {
    m.pyramid_bins = parse_size_list(key, v);
  } else if (key == "atrous_rates") {
    m.atrous_rates = parse_size_list(key, v);
  } else if (key == "loss") {
    cfg.loss.kind = with_key(key, [&] { return losses::parse_loss_kind(v); });
  } else if (key == "class_weights") {
    cfg.loss.class_weights.clear();
    for (auto item : split_list(v)) cfg.loss.class_weights.push_back(parse_double(key, item));
  } else if (key == "dice_smoothing") {
    cfg.loss.smoothing = parse_double(key, v);
  } else if (key == "learning_rate" || key == "lr") {
    cfg.learning_rate = parse_double(key, v);
  } else if (key == "batch_size") {
    cfg.batch_size = parse_size(key, v);
  } else if (key == "epochs") {
    cfg.epochs = parse_size(key, v);
  } else if (key == "seed") {
    cfg.seed = parse_u64(key, v);
  } else if (key == "freeze_encoder") {
    cfg.freeze_encoder = parse_bool(key, v);
  } else if (key == "eval_threshold" || key == "eval_thresholds") {
    cfg.eval_threshold = parse_double(key, v);
  } else if (key == "resize_to") {
    // "256x512", "256,512", or empty / "none" for native size
    if (v.empty() || v == "none") {
      cfg.resize_h = cfg.resize_w = 0;
    } else {
      auto sep = v.find_first_of("x,");
      if (sep == std::string_view::npos) bad_value(key, v, "HxW");
      cfg.resize_h = parse_size(key, trim(v.substr(0, sep)));
      cfg.resize_w = parse_size(key, trim(v.substr(sep + 1)));
    }
  } else if (key == "absent_class_policy") {
    cfg.absent_class_policy = with_key(key, [&] { return metrics::parse_absent_class_policy(v); });
  } else if (key == "unknown_color") {
    cfg.unknown_color = with_key(key, [&] { return data::parse_unknown_color_policy(v); });
  } else if (key == "palette") {
    cfg.palette = std::string(v);
  } else if (key == "encoder_checkpoint") {
    cfg.encoder_checkpoint = std::string(v);
  } else if (key == "train_manifest") {
    cfg.train_manifest = std::string(v);
  } else if (key == "val_manifest") {
    cfg.val_manifest = std::string(v);
  } else if (key == "out_dir") {
    cfg.out_dir = std::string(v);
  } else if (key == "combinations") {
    cfg.combinations.clear();
    for (auto item : split_list(v)) cfg.combinations.push_back(parse_combination(item));
  } else if (key == "overlays") {
    cfg.overlays = parse_size(key, v);
    if (cfg.overlays > 8) bad_value(key, v, "at most 8");
  } else {
    fail(Errc::kBadConfig, "unknown setting '" + std::string(key) + "'");
  }
}

void apply_settings(TrainConfig& cfg, const Settings& settings) {
  for (const auto& [k, v] : settings) apply_setting(cfg, k, v);
}

Settings to_settings(const TrainConfig& cfg) {
  const auto& m = cfg.model;
  const auto& b = m.backbone;
  auto sz = [](std::size_t x) { return std::to_string(x); };
  auto dbl = [](double x) { return fmt_double(x); };
  return {
      {"architecture", std::string(models::to_string(m.architecture))},
      {"backbone", std::string(models::to_string(b.family))},
      {"base_width", sz(b.base_width)},
      {"depth_per_stage", join(b.depth_per_stage, sz)},
      {"compound_phi", dbl(b.compound_phi)},
      {"compound_coefficients",
       dbl(b.coefficients.alpha) + "," + dbl(b.coefficients.beta) + "," + dbl(b.coefficients.gamma)},
      {"num_classes", sz(m.num_classes)},
      {"decoder_width", sz(m.decoder_width)},
      {"output_stride", sz(m.output_stride)},
      {"pyramid_bins", join(m.pyramid_bins, sz)},
      {"atrous_rates", join(m.atrous_rates, sz)},
      {"loss", std::string(losses::to_string(cfg.loss.kind))},
      {"class_weights", join(cfg.loss.class_weights, dbl)},
      {"dice_smoothing", dbl(cfg.loss.smoothing)},
      {"learning_rate", dbl(cfg.learning_rate)},
      {"batch_size", sz(cfg.batch_size)},
      {"epochs", sz(cfg.epochs)},
      {"seed", std::to_string(cfg.seed)},
      {"freeze_encoder", cfg.freeze_encoder ? "true" : "false"},
      {"eval_threshold", dbl(cfg.eval_threshold)},
      {"resize_to", cfg.resize_h ? sz(cfg.resize_h) + "x" + sz(cfg.resize_w) : "none"},
      {"absent_class_policy", std::string(metrics::to_string(cfg.absent_class_policy))},
      {"unknown_color", cfg.unknown_color == data::UnknownColorPolicy::kStrict ? "strict" : "map_to_zero"},
      {"palette", cfg.palette},
      {"encoder_checkpoint", cfg.encoder_checkpoint},
      {"train_manifest", cfg.train_manifest},
      {"val_manifest", cfg.val_manifest},
      {"out_dir", cfg.out_dir},
      {"combinations", join(cfg.combinations, [](const Combination& c) { return to_string(c); })},
      {"overlays", sz(cfg.overlays)},
  };
}

std::string render_settings(const Settings& settings) {
  std::string out;
  for (const auto& [k, v] : settings) out += k + " = " + v + "\n";
  return out;
}

std::string to_string(const Combination& c) {
  return std::string(models::to_string(c.architecture)) + ":" + std::string(models::to_string(c.family));
}

Combination parse_combination(std::string_view text) {
  const auto colon = text.find(':');
  if (colon == std::string_view::npos) {
    fail(Errc::kBadConfig, "combinations: '" + std::string(text) + "' is not architecture:backbone");
  }
  return with_key("combinations", [&] {
    return Combination{models::parse_architecture(trim(text.substr(0, colon))),
                       models::parse_family(trim(text.substr(colon + 1)))};
  });
}

std::string_view display_name(models::Architecture arch) {
  using models::Architecture;
  switch (arch) {
    case Architecture::kUnet: return "Unet";
    case Architecture::kFpn: return "FPN";
    case Architecture::kLinknet: return "Linknet";
    case Architecture::kPspnet: return "PSPNet";
    case Architecture::kDeeplabv3plus: return "DeepLabV3+";
  }
  return "?";
}

std::string_view display_name(models::Family family) {
  using models::Family;
  switch (family) {
    case Family::kVgg: return "VGG";
    case Family::kResnet: return "ResNet";
    case Family::kDensenet: return "DenseNet";
    case Family::kInception: return "Inception";
    case Family::kMobilenet: return "MobileNet";
    case Family::kEfficientnet: return "EfficientNet";
  }
  return "?";
}

}  // namespace segkit::train
