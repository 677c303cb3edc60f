#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "segkit/tensor.hpp"

// Colour masks <-> integer label maps.
namespace segkit::data {

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  auto operator<=>(const Rgb&) const = default;
};

std::string rgb_str(Rgb c);

// "3C1098" or "#3C1098" -> (60, 16, 152). Throws kBadHex.
Rgb hex_to_rgb(std::string_view hex);

struct PaletteEntry {
  int id = 0;
  std::string name;
  Rgb rgb;
};

class LabelPalette {
 public:
  // Ids must be 0..C-1 in order (kBadFormat otherwise). Duplicate colours are
  // allowed; lookups resolve to the lowest id.
  LabelPalette(std::vector<PaletteEntry> entries, std::string name);

  // The 22-class driving-scene palette (two classes share black).
  static LabelPalette bdd22();
  // The 19 evaluation classes in report order.
  static LabelPalette eval19();
  // Text file, one "id name r g b" per line; '#' starts a comment.
  static LabelPalette load(const std::filesystem::path& path);
  // "bdd22", "eval19" or a palette file path.
  static LabelPalette resolve(std::string_view name_or_path);

  void save(const std::filesystem::path& path) const;

  std::size_t size() const { return entries_.size(); }
  const std::vector<PaletteEntry>& entries() const { return entries_; }
  const std::string& name() const { return name_; }

  std::optional<int> lookup(Rgb color) const;
  Rgb color(int id) const;  // kLabelOutOfRange
  // (winning id, shadowed id) for every colour listed more than once.
  std::vector<std::pair<int, int>> duplicates() const;

 private:
  std::vector<PaletteEntry> entries_;
  std::string name_;
  std::map<Rgb, int> index_;
};

// Interleaved 8-bit RGB, row-major H x W x 3.
struct RgbImage {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> pixels;

  Rgb at(std::size_t y, std::size_t x) const {
    const std::size_t i = (y * width + x) * 3;
    return {pixels[i], pixels[i + 1], pixels[i + 2]};
  }
};

struct LabelMap {
  std::size_t height = 0, width = 0;
  std::vector<int> labels;
};

enum class UnknownColorPolicy { kStrict, kMapToZero };
UnknownColorPolicy parse_unknown_color_policy(std::string_view name);

struct MaskReport {
  std::size_t unknown_pixels = 0;
  std::map<Rgb, std::size_t> unknown_colors;
};

// Unmatched colours raise kUnknownColor (strict, listing each colour and its
// pixel count) or become class 0 with a warning.
LabelMap rgb_mask_to_labels(const RgbImage& mask, const LabelPalette& palette,
                            UnknownColorPolicy policy = UnknownColorPolicy::kMapToZero,
                            MaskReport* report = nullptr);

RgbImage labels_to_rgb(const LabelMap& labels, const LabelPalette& palette);

// C x H x W indicator tensor. Throws kLabelOutOfRange.
Tensor labels_to_onehot(const LabelMap& labels, std::size_t num_classes);

// Pixel count per class. Throws kLabelOutOfRange.
std::vector<std::uint64_t> class_histogram(const LabelMap& labels, std::size_t num_classes);

// Nearest-neighbour resize (half-pixel centres); never invents labels.
LabelMap resize_nearest(const LabelMap& labels, std::size_t height, std::size_t width);

// 3 x H x W tensor in [0, 1].
Tensor image_to_tensor(const RgbImage& image);
// Inverse of image_to_tensor for a 3 x H x W tensor, clamped and rounded.
RgbImage tensor_to_image(const Tensor& chw);

}  // namespace segkit::data
