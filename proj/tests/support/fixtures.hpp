#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "segkit/data.hpp"
#include "segkit/error.hpp"
#include "segkit/dataset.hpp"
#include "segkit/layers.hpp"
#include "segkit/tensor.hpp"

namespace segkit::testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag);
  ~TempDir();
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& leaf) const { return path_ / leaf; }

 private:
  std::filesystem::path path_;
};

// Collects warnings instead of printing them while in scope.
class WarningCapture {
 public:
  WarningCapture();
  ~WarningCapture();
  const std::vector<std::string>& messages() const;
  bool contains(const std::string& needle) const;

 private:
  WarningSink previous_;
};

Tensor random_tensor(nn::Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0);

// Four 32x32 two-class images: a bright region (0.85 on every channel, class
// 1) on a dark background (0.15, class 0). Regions are the left half, the
// top half, the bottom-right and the bottom-left quadrants.
std::vector<data::SegmentationSample> overfit_fixture();

// Two-entry palette: background black, foreground road-purple.
data::LabelPalette two_class_palette();

// Writes images and colour masks as PPM plus a manifest; returns the
// manifest path.
std::filesystem::path write_dataset(const std::filesystem::path& dir, const std::string& stem,
                                    const std::vector<data::SegmentationSample>& samples,
                                    const data::LabelPalette& palette, const std::string& dataset,
                                    data::Split split, const std::string& palette_ref);

// Random label map with classes in [0, num_classes).
data::LabelMap random_labels(nn::Rng& rng, std::size_t h, std::size_t w, std::size_t num_classes);

}  // namespace segkit::testing
