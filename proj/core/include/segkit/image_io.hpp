#pragma once

#include <filesystem>

#include "segkit/data.hpp"

// PNG (via libpng) and binary PPM (P6, maxval 255).
namespace segkit::data {

// Format chosen by file signature. kMissingFile / kBadFormat, with the path.
RgbImage read_image(const std::filesystem::path& path);

void write_ppm(const std::filesystem::path& path, const RgbImage& image);
void write_png(const std::filesystem::path& path, const RgbImage& image);
// ".png" -> PNG, anything else -> PPM.
void write_image(const std::filesystem::path& path, const RgbImage& image);

}  // namespace segkit::data
