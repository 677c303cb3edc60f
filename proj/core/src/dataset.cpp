#include "segkit/dataset.hpp"

#include <fstream>
#include <numeric>

#include "segkit/error.hpp"
#include "segkit/image_io.hpp"
#include "segkit/layers.hpp"
#include "segkit/nn.hpp"

namespace segkit::data {

namespace fs = std::filesystem;

std::string_view to_string(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::kTrain;
  if (name == "val" || name == "validation") return Split::kVal;
  if (name == "test") return Split::kTest;
  fail(Errc::kBadManifest, "unknown split '" + std::string(name) + "'");
}

namespace {

std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

fs::path resolve_against(const fs::path& base, const std::string& p) {
  fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

}  // namespace

DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(Errc::kMissingFile, "manifest " + path.string());
  DatasetManifest m;
  m.source = path;
  const fs::path base = path.parent_path();
  bool have_split = false;
  std::string line;
  std::size_t line_no = 0;
  auto where = [&] { return path.string() + ":" + std::to_string(line_no) + ": "; };
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    if (line.front() == '#') {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;  // plain comment
      const std::string key = trim(line.substr(1, eq - 1));
      const std::string value = trim(line.substr(eq + 1));
      if (key == "dataset") {
        m.dataset = value;
      } else if (key == "split") {
        try {
          m.split = parse_split(value);
        } catch (const Error& e) {
          fail(Errc::kBadManifest, where() + e.detail());
        }
        have_split = true;
      } else if (key == "palette") {
        m.palette = value;
      } else {
        fail(Errc::kBadManifest, where() + "unknown header '" + key + "'");
      }
      continue;
    }
    const auto tab = line.find('\t');
    if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos) {
      fail(Errc::kBadManifest, where() + "expected 'image<TAB>mask'");
    }
    const std::string image = trim(line.substr(0, tab)), mask = trim(line.substr(tab + 1));
    if (image.empty() || mask.empty()) fail(Errc::kBadManifest, where() + "empty path");
    ImageMaskPair pair{resolve_against(base, image), resolve_against(base, mask)};
    for (const auto& f : {pair.image, pair.mask}) {
      if (!fs::is_regular_file(f)) fail(Errc::kMissingFile, where() + f.string());
    }
    m.pairs.push_back(std::move(pair));
  }
  if (!have_split) fail(Errc::kBadManifest, path.string() + ": missing '#split=' header");
  return m;
}

void save_manifest(const fs::path& path, const DatasetManifest& manifest) {
  std::ofstream out(path);
  if (!out) fail(Errc::kMissingFile, "cannot write " + path.string());
  const fs::path base = path.parent_path().empty() ? fs::path(".") : path.parent_path();
  auto rel = [&](const fs::path& p) {
    std::error_code ec;
    fs::path r = fs::relative(p, base, ec);
    return (ec || r.empty()) ? p.generic_string() : r.generic_string();
  };
  if (!manifest.dataset.empty()) out << "#dataset=" << manifest.dataset << '\n';
  out << "#split=" << to_string(manifest.split) << '\n';
  out << "#palette=" << manifest.palette << '\n';
  for (const auto& p : manifest.pairs) out << rel(p.image) << '\t' << rel(p.mask) << '\n';
}

std::optional<std::size_t> expected_pairs(std::string_view dataset, Split split) {
  if (dataset != "camvid") return std::nullopt;
  switch (split) {
    case Split::kTrain: return kCamvidTrain;
    case Split::kVal: return kCamvidVal;
    case Split::kTest: return kCamvidTest;
  }
  return std::nullopt;
}

bool SplitReport::ok() const {
  for (const auto& c : checks)
    if (!c.ok) return false;
  return true;
}

SplitReport validate_splits(std::span<const DatasetManifest> manifests) {
  SplitReport report;
  for (const auto& m : manifests) {
    SplitCheck c{m.dataset, m.split, m.pairs.size(), expected_pairs(m.dataset, m.split), true};
    if (c.expected && *c.expected != c.pairs) {
      c.ok = false;
      warn(m.dataset + " " + std::string(to_string(m.split)) + " split has " + std::to_string(c.pairs) +
           " pairs, expected " + std::to_string(*c.expected) +
           (m.source.empty() ? "" : " (" + m.source.string() + ")"));
    }
    report.checks.push_back(std::move(c));
  }
  return report;
}

ManifestSource::ManifestSource(DatasetManifest manifest, LabelPalette palette, UnknownColorPolicy policy)
    : manifest_(std::move(manifest)), palette_(std::move(palette)), policy_(policy) {}

SegmentationSample ManifestSource::load(std::size_t index) const {
  const auto& pair = manifest_.pairs.at(index);
  const RgbImage image = read_image(pair.image);
  const RgbImage mask = read_image(pair.mask);
  if (image.height != mask.height || image.width != mask.width) {
    fail(Errc::kShapeMismatch, pair.image.string() + " and " + pair.mask.string() + " differ in size");
  }
  SegmentationSample s;
  try {
    s.labels = rgb_mask_to_labels(mask, palette_, policy_);
  } catch (const Error& e) {
    fail(e.code(), pair.mask.string() + ": " + e.detail());
  }
  s.image = image_to_tensor(image);
  s.image_path = pair.image;
  s.mask_path = pair.mask;
  return s;
}

InMemorySource::InMemorySource(std::vector<SegmentationSample> samples) : samples_(std::move(samples)) {
  for (const auto& s : samples_) {
    if (s.image.rank() != 3 || s.image.dim(0) != 3 || s.image.dim(1) != s.labels.height ||
        s.image.dim(2) != s.labels.width || s.labels.labels.size() != s.labels.height * s.labels.width) {
      fail(Errc::kShapeMismatch, "sample image and label map disagree");
    }
  }
}

SegmentationSample InMemorySource::load(std::size_t index) const { return samples_.at(index); }

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch, bool shuffle) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (!shuffle || n < 2) return order;
  nn::Rng rng(seed ^ (0x9e3779b97f4a7c15ULL * (epoch + 1)));
  for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);
  return order;
}

BatchIterator::BatchIterator(const SampleSource& source, std::size_t num_classes, BatchOptions options,
                             std::size_t epoch)
    : source_(source), num_classes_(num_classes), options_(options) {
  if (options_.batch_size == 0) fail(Errc::kBadConfig, "batch_size must be >= 1");
  if (num_classes_ < 2) fail(Errc::kBadConfig, "need at least 2 classes");
  if ((options_.resize_h == 0) != (options_.resize_w == 0)) {
    fail(Errc::kBadConfig, "resize_to needs both height and width");
  }
  if (options_.resize_h % 32 != 0 || options_.resize_w % 32 != 0) {
    fail(Errc::kInputNotDivisible, "resize_to " + std::to_string(options_.resize_h) + "x" +
                                       std::to_string(options_.resize_w) + " is not a multiple of 32");
  }
  order_ = epoch_order(source_.size(), options_.seed, epoch, options_.shuffle);
  batch_count_ = (order_.size() + options_.batch_size - 1) / options_.batch_size;
  if (batch_count_ > 0) worker_ = std::thread([this] { produce(); });
}

BatchIterator::~BatchIterator() {
  {
    std::lock_guard lock(mu_);
    stop_ = true;
  }
  cv_.notify_all();
  if (worker_.joinable()) worker_.join();
}

void BatchIterator::produce() {
  for (std::size_t b = 0; b < batch_count_; ++b) {
    {
      std::unique_lock lock(mu_);
      cv_.wait(lock, [this] { return stop_ || ready_.size() < kMaxBatchesInFlight; });
      if (stop_) return;
    }
    Slot slot;
    try {
      slot.batch = assemble(b);
    } catch (...) {
      slot.error = std::current_exception();
    }
    const bool failed = slot.error != nullptr;
    {
      std::lock_guard lock(mu_);
      ready_.push_back(std::move(slot));
    }
    cv_.notify_all();
    if (failed) return;
  }
}

std::optional<Batch> BatchIterator::next() {
  if (delivered_ >= batch_count_) return std::nullopt;
  Slot slot;
  {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [this] { return !ready_.empty(); });
    slot = std::move(ready_.front());
    ready_.pop_front();
  }
  cv_.notify_all();
  ++delivered_;
  if (slot.error) {
    delivered_ = batch_count_;
    std::rethrow_exception(slot.error);
  }
  return std::move(slot.batch);
}

Batch BatchIterator::assemble(std::size_t b) const {
  const std::size_t begin = b * options_.batch_size;
  const std::size_t end = std::min(order_.size(), begin + options_.batch_size);
  Batch batch;
  std::vector<double> images, onehot;
  std::size_t h = 0, w = 0;
  for (std::size_t k = begin; k < end; ++k) {
    const std::size_t index = order_[k];
    SegmentationSample s = source_.load(index);
    const std::string where = s.image_path.empty() ? "sample " + std::to_string(index) : s.image_path.string();
    Tensor image = s.image;
    LabelMap labels = std::move(s.labels);
    if (options_.resize_h != 0) {
      if (image.dim(1) != options_.resize_h || image.dim(2) != options_.resize_w) {
        const Tensor nchw = Tensor::from_vector({1, 3, image.dim(1), image.dim(2)},
                                                std::vector<double>(image.data().begin(), image.data().end()));
        const Tensor resized = nn::resize_bilinear(nchw, options_.resize_h, options_.resize_w);
        image = Tensor::from_vector({3, options_.resize_h, options_.resize_w},
                                    std::vector<double>(resized.data().begin(), resized.data().end()));
      }
      labels = resize_nearest(labels, options_.resize_h, options_.resize_w);
    }
    if (k == begin) {
      h = image.dim(1);
      w = image.dim(2);
    } else if (image.dim(1) != h || image.dim(2) != w) {
      fail(Errc::kShapeMismatch, where + ": size differs from the rest of its batch (set resize_to)");
    }
    Tensor oh;
    try {
      oh = labels_to_onehot(labels, num_classes_);
    } catch (const Error& e) {
      fail(e.code(), where + ": " + e.detail());
    }
    images.insert(images.end(), image.data().begin(), image.data().end());
    onehot.insert(onehot.end(), oh.data().begin(), oh.data().end());
    batch.labels.insert(batch.labels.end(), labels.labels.begin(), labels.labels.end());
    batch.indices.push_back(index);
  }
  const std::size_t n = batch.indices.size();
  batch.images = Tensor::from_vector({n, 3, h, w}, std::move(images));
  batch.onehot = Tensor::from_vector({n, num_classes_, h, w}, std::move(onehot));
  return batch;
}

}  // namespace segkit::data
