#include "fixtures.hpp"

#include <atomic>
#include <fstream>
#include <mutex>

#include <unistd.h>

#include "segkit/image_io.hpp"

namespace segkit::testing {

namespace fs = std::filesystem;

TempDir::TempDir(const std::string& tag) {
  static std::atomic<int> counter{0};
  path_ = fs::temp_directory_path() /
          ("segkit_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
  fs::remove_all(path_);
  fs::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  fs::remove_all(path_, ec);
}

namespace {
std::mutex g_warn_mu;
std::vector<std::string> g_warnings;
void capture(const std::string& m) {
  std::lock_guard lock(g_warn_mu);
  g_warnings.push_back(m);
}
}  // namespace

WarningCapture::WarningCapture() {
  std::lock_guard lock(g_warn_mu);
  g_warnings.clear();
  previous_ = set_warning_sink(&capture);
}

WarningCapture::~WarningCapture() { set_warning_sink(previous_); }

const std::vector<std::string>& WarningCapture::messages() const { return g_warnings; }

bool WarningCapture::contains(const std::string& needle) const {
  std::lock_guard lock(g_warn_mu);
  for (auto& m : g_warnings)
    if (m.find(needle) != std::string::npos) return true;
  return false;
}

Tensor random_tensor(nn::Rng& rng, Shape shape, double lo, double hi) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from_vector(std::move(shape), std::move(v));
}

std::vector<data::SegmentationSample> overfit_fixture() {
  using Region = bool (*)(std::size_t, std::size_t);
  const Region regions[4] = {
      [](std::size_t, std::size_t x) { return x < 16; },
      [](std::size_t y, std::size_t) { return y < 16; },
      [](std::size_t y, std::size_t x) { return x >= 16 && y >= 16; },
      [](std::size_t y, std::size_t x) { return x < 16 && y >= 16; },
  };
  std::vector<data::SegmentationSample> out;
  for (const Region inside : regions) {
    data::SegmentationSample s;
    s.labels = {32, 32, std::vector<int>(32 * 32)};
    std::vector<double> img(3 * 32 * 32);
    for (std::size_t y = 0; y < 32; ++y)
      for (std::size_t x = 0; x < 32; ++x) {
        const bool on = inside(y, x);
        s.labels.labels[y * 32 + x] = on ? 1 : 0;
        for (std::size_t c = 0; c < 3; ++c) img[c * 1024 + y * 32 + x] = on ? 0.85 : 0.15;
      }
    s.image = Tensor::from_vector({3, 32, 32}, std::move(img));
    out.push_back(std::move(s));
  }
  return out;
}

data::LabelPalette two_class_palette() {
  return data::LabelPalette({{0, "background", {0, 0, 0}}, {1, "road", {128, 64, 128}}}, "two");
}

fs::path write_dataset(const fs::path& dir, const std::string& stem,
                       const std::vector<data::SegmentationSample>& samples, const data::LabelPalette& palette,
                       const std::string& dataset, data::Split split, const std::string& palette_ref) {
  fs::create_directories(dir);
  data::DatasetManifest m;
  m.dataset = dataset;
  m.split = split;
  m.palette = palette_ref;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const fs::path img = dir / (stem + "_img" + std::to_string(i) + ".ppm");
    const fs::path mask = dir / (stem + "_mask" + std::to_string(i) + ".ppm");
    data::write_ppm(img, data::tensor_to_image(samples[i].image));
    data::write_ppm(mask, data::labels_to_rgb(samples[i].labels, palette));
    m.pairs.push_back({img, mask});
  }
  const fs::path manifest = dir / (stem + ".manifest");
  data::save_manifest(manifest, m);
  return manifest;
}

data::LabelMap random_labels(nn::Rng& rng, std::size_t h, std::size_t w, std::size_t num_classes) {
  data::LabelMap m{h, w, std::vector<int>(h * w)};
  for (auto& v : m.labels) v = static_cast<int>(rng.below(num_classes));
  return m;
}

}  // namespace segkit::testing
