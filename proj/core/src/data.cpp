#include "segkit/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "segkit/error.hpp"

namespace segkit::data {

std::string rgb_str(Rgb c) {
  return "(" + std::to_string(c.r) + "," + std::to_string(c.g) + "," + std::to_string(c.b) + ")";
}

namespace {

int hex_digit(char c) {
  if (c >= '0' && c <= '9') return c - '0';
  if (c >= 'a' && c <= 'f') return c - 'a' + 10;
  if (c >= 'A' && c <= 'F') return c - 'A' + 10;
  return -1;
}

}  // namespace

Rgb hex_to_rgb(std::string_view hex) {
  const std::string original(hex);
  if (!hex.empty() && hex.front() == '#') hex.remove_prefix(1);
  if (hex.size() != 6) fail(Errc::kBadHex, "'" + original + "' is not a 6-digit colour");
  std::uint8_t channel[3];
  for (int i = 0; i < 3; ++i) {
    const int hi = hex_digit(hex[2 * i]), lo = hex_digit(hex[2 * i + 1]);
    if (hi < 0 || lo < 0) fail(Errc::kBadHex, "'" + original + "' has a non-hex digit");
    channel[i] = static_cast<std::uint8_t>(16 * hi + lo);
  }
  return {channel[0], channel[1], channel[2]};
}

LabelPalette::LabelPalette(std::vector<PaletteEntry> entries, std::string name)
    : entries_(std::move(entries)), name_(std::move(name)) {
  if (entries_.empty()) fail(Errc::kBadFormat, "palette '" + name_ + "' is empty");
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].id != static_cast<int>(i)) {
      fail(Errc::kBadFormat, "palette '" + name_ + "': ids must be 0..C-1 in order (entry " +
                                 std::to_string(i) + " has id " + std::to_string(entries_[i].id) + ")");
    }
    index_.emplace(entries_[i].rgb, entries_[i].id);  // first (lowest) id wins
  }
}

LabelPalette LabelPalette::bdd22() {
  return LabelPalette({{0, "unlabeled", {0, 0, 0}},
                       {1, "static", {0, 0, 0}},
                       {2, "road", {128, 64, 128}},
                       {3, "sidewalk", {244, 35, 232}},
                       {4, "building", {70, 70, 70}},
                       {5, "fence", {190, 153, 153}},
                       {6, "wall", {102, 102, 156}},
                       {7, "polegroup", {153, 153, 153}},
                       {8, "traffic_light", {250, 170, 30}},
                       {9, "traffic_sign", {220, 220, 0}},
                       {10, "terrain", {152, 251, 152}},
                       {11, "vegetation", {107, 142, 35}},
                       {12, "sky", {70, 130, 180}},
                       {13, "person", {220, 20, 60}},
                       {14, "rider", {255, 0, 0}},
                       {15, "bicycle", {119, 11, 32}},
                       {16, "bus", {0, 60, 100}},
                       {17, "car", {0, 0, 142}},
                       {18, "caravan", {0, 0, 90}},
                       {19, "motorcycle", {0, 0, 230}},
                       {20, "train", {0, 80, 100}},
                       {21, "truck", {0, 0, 70}}},
                      "bdd22");
}

LabelPalette LabelPalette::eval19() {
  return LabelPalette({{0, "road", {128, 64, 128}},
                       {1, "sidewalk", {244, 35, 232}},
                       {2, "building", {70, 70, 70}},
                       {3, "wall", {102, 102, 156}},
                       {4, "fence", {190, 153, 153}},
                       {5, "pole", {153, 153, 153}},
                       {6, "light", {250, 170, 30}},
                       {7, "sign", {220, 220, 0}},
                       {8, "vegetation", {107, 142, 35}},
                       {9, "terrain", {152, 251, 152}},
                       {10, "sky", {70, 130, 180}},
                       {11, "person", {220, 20, 60}},
                       {12, "rider", {255, 0, 0}},
                       {13, "car", {0, 0, 142}},
                       {14, "truck", {0, 0, 70}},
                       {15, "bus", {0, 60, 100}},
                       {16, "train", {0, 80, 100}},
                       {17, "motorcycle", {0, 0, 230}},
                       {18, "bicycle", {119, 11, 32}}},
                      "eval19");
}

LabelPalette LabelPalette::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(Errc::kMissingFile, "palette file " + path.string());
  std::vector<PaletteEntry> entries;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream fields(line);
    PaletteEntry e;
    int r, g, b;
    if (!(fields >> e.id)) continue;  // blank line
    if (!(fields >> e.name >> r >> g >> b) || r < 0 || r > 255 || g < 0 || g > 255 || b < 0 ||
        b > 255) {
      fail(Errc::kBadFormat, path.string() + ":" + std::to_string(line_no) +
                                 ": expected 'id name r g b' with channels in 0..255");
    }
    e.rgb = {static_cast<std::uint8_t>(r), static_cast<std::uint8_t>(g), static_cast<std::uint8_t>(b)};
    entries.push_back(std::move(e));
  }
  return LabelPalette(std::move(entries), path.stem().string());
}

LabelPalette LabelPalette::resolve(std::string_view name_or_path) {
  if (name_or_path == "bdd22") return bdd22();
  if (name_or_path == "eval19") return eval19();
  return load(std::filesystem::path(name_or_path));
}

void LabelPalette::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) fail(Errc::kMissingFile, "cannot write " + path.string());
  for (const auto& e : entries_) {
    out << e.id << ' ' << e.name << ' ' << int(e.rgb.r) << ' ' << int(e.rgb.g) << ' '
        << int(e.rgb.b) << '\n';
  }
}

std::optional<int> LabelPalette::lookup(Rgb color) const {
  auto it = index_.find(color);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

Rgb LabelPalette::color(int id) const {
  if (id < 0 || id >= static_cast<int>(entries_.size())) {
    fail(Errc::kLabelOutOfRange, "class " + std::to_string(id) + " not in palette '" + name_ + "'");
  }
  return entries_[static_cast<std::size_t>(id)].rgb;
}

std::vector<std::pair<int, int>> LabelPalette::duplicates() const {
  std::vector<std::pair<int, int>> out;
  for (const auto& e : entries_) {
    const int winner = index_.at(e.rgb);
    if (winner != e.id) out.emplace_back(winner, e.id);
  }
  return out;
}

UnknownColorPolicy parse_unknown_color_policy(std::string_view name) {
  if (name == "strict") return UnknownColorPolicy::kStrict;
  if (name == "map_to_zero" || name == "map-to-zero") return UnknownColorPolicy::kMapToZero;
  fail(Errc::kBadConfig, "unknown_color must be strict or map_to_zero, got '" + std::string(name) + "'");
}

LabelMap rgb_mask_to_labels(const RgbImage& mask, const LabelPalette& palette,
                            UnknownColorPolicy policy, MaskReport* report) {
  if (mask.pixels.size() != mask.height * mask.width * 3) {
    fail(Errc::kShapeMismatch, "mask buffer does not match its dimensions");
  }
  LabelMap out{mask.height, mask.width, std::vector<int>(mask.height * mask.width, 0)};
  MaskReport local;
  for (std::size_t i = 0; i < out.labels.size(); ++i) {
    const Rgb c{mask.pixels[3 * i], mask.pixels[3 * i + 1], mask.pixels[3 * i + 2]};
    if (auto id = palette.lookup(c)) {
      out.labels[i] = *id;
    } else {
      ++local.unknown_pixels;
      ++local.unknown_colors[c];
    }
  }
  if (local.unknown_pixels > 0) {
    std::string listing;
    for (const auto& [c, n] : local.unknown_colors) {
      if (!listing.empty()) listing += ", ";
      listing += rgb_str(c) + " x" + std::to_string(n);
    }
    if (policy == UnknownColorPolicy::kStrict) {
      fail(Errc::kUnknownColor, "colours not in palette '" + palette.name() + "': " + listing);
    }
    warn(std::to_string(local.unknown_pixels) + " pixels with colours outside palette '" +
         palette.name() + "' mapped to class 0: " + listing);
  }
  if (report) *report = std::move(local);
  return out;
}

RgbImage labels_to_rgb(const LabelMap& labels, const LabelPalette& palette) {
  RgbImage out{labels.height, labels.width, std::vector<std::uint8_t>(labels.labels.size() * 3)};
  for (std::size_t i = 0; i < labels.labels.size(); ++i) {
    const Rgb c = palette.color(labels.labels[i]);
    out.pixels[3 * i] = c.r;
    out.pixels[3 * i + 1] = c.g;
    out.pixels[3 * i + 2] = c.b;
  }
  return out;
}

namespace {

void check_labels(const LabelMap& labels, std::size_t num_classes) {
  for (int l : labels.labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= num_classes) {
      fail(Errc::kLabelOutOfRange,
           "label " + std::to_string(l) + " outside [0, " + std::to_string(num_classes) + ")");
    }
  }
}

}  // namespace

Tensor labels_to_onehot(const LabelMap& labels, std::size_t num_classes) {
  check_labels(labels, num_classes);
  const std::size_t plane = labels.height * labels.width;
  std::vector<double> v(num_classes * plane, 0.0);
  for (std::size_t i = 0; i < plane; ++i) v[static_cast<std::size_t>(labels.labels[i]) * plane + i] = 1.0;
  return Tensor::from_vector({num_classes, labels.height, labels.width}, std::move(v));
}

std::vector<std::uint64_t> class_histogram(const LabelMap& labels, std::size_t num_classes) {
  check_labels(labels, num_classes);
  std::vector<std::uint64_t> counts(num_classes, 0);
  for (int l : labels.labels) ++counts[static_cast<std::size_t>(l)];
  return counts;
}

LabelMap resize_nearest(const LabelMap& labels, std::size_t height, std::size_t width) {
  if (labels.height == height && labels.width == width) return labels;
  LabelMap out{height, width, std::vector<int>(height * width)};
  for (std::size_t y = 0; y < height; ++y) {
    const std::size_t sy = std::min(labels.height - 1, (2 * y + 1) * labels.height / (2 * height));
    for (std::size_t x = 0; x < width; ++x) {
      const std::size_t sx = std::min(labels.width - 1, (2 * x + 1) * labels.width / (2 * width));
      out.labels[y * width + x] = labels.labels[sy * labels.width + sx];
    }
  }
  return out;
}

Tensor image_to_tensor(const RgbImage& image) {
  const std::size_t plane = image.height * image.width;
  std::vector<double> v(3 * plane);
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t c = 0; c < 3; ++c) v[c * plane + i] = image.pixels[3 * i + c] / 255.0;
  return Tensor::from_vector({3, image.height, image.width}, std::move(v));
}

RgbImage tensor_to_image(const Tensor& chw) {
  if (chw.rank() != 3 || chw.dim(0) != 3) fail(Errc::kShapeMismatch, "expected 3 x H x W image tensor");
  RgbImage out{chw.dim(1), chw.dim(2), {}};
  const std::size_t plane = out.height * out.width;
  out.pixels.resize(3 * plane);
  const auto d = chw.data();
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = std::clamp(d[c * plane + i], 0.0, 1.0);
      out.pixels[3 * i + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
  return out;
}

}  // namespace segkit::data
