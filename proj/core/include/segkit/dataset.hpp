#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <exception>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "segkit/data.hpp"
#include "segkit/tensor.hpp"

// Manifests of (image, mask) pairs and deterministic mini-batching.
namespace segkit::data {

enum class Split { kTrain, kVal, kTest };
std::string_view to_string(Split split);
Split parse_split(std::string_view name);  // kBadManifest

struct ImageMaskPair {
  std::filesystem::path image;
  std::filesystem::path mask;
};

struct DatasetManifest {
  std::string dataset;              // "camvid", "bdd100k", ...
  Split split = Split::kTrain;
  std::string palette = "bdd22";    // built-in name or palette file
  std::vector<ImageMaskPair> pairs; // absolute, or relative to the cwd
  std::filesystem::path source;
};

// Header lines "#dataset=", "#split=", "#palette=", then one
// "image<TAB>mask" per line, resolved against the manifest's directory.
// kMissingFile for the manifest or any listed file, kBadManifest otherwise.
DatasetManifest load_manifest(const std::filesystem::path& path);
// Paths are written relative to the manifest's directory where possible.
void save_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);

// Pair counts of the standard CamVid split.
inline constexpr std::size_t kCamvidTrain = 367;
inline constexpr std::size_t kCamvidVal = 101;
inline constexpr std::size_t kCamvidTest = 233;
std::optional<std::size_t> expected_pairs(std::string_view dataset, Split split);

struct SplitCheck {
  std::string dataset;
  Split split = Split::kTrain;
  std::size_t pairs = 0;
  std::optional<std::size_t> expected;  // empty: not enforced
  bool ok = true;
};

struct SplitReport {
  std::vector<SplitCheck> checks;
  bool ok() const;
};

// Counts are enforced only for datasets with a known split (camvid). A
// mismatch is reported and warned about, never thrown.
SplitReport validate_splits(std::span<const DatasetManifest> manifests);

struct SegmentationSample {
  Tensor image;  // 3 x H x W in [0, 1]
  LabelMap labels;
  std::filesystem::path image_path, mask_path;
};

class SampleSource {
 public:
  virtual ~SampleSource() = default;
  virtual std::size_t size() const = 0;
  // Must be safe to call from the prefetch thread.
  virtual SegmentationSample load(std::size_t index) const = 0;
};

// Decodes pairs on demand; errors carry the offending path.
class ManifestSource : public SampleSource {
 public:
  ManifestSource(DatasetManifest manifest, LabelPalette palette,
                 UnknownColorPolicy policy = UnknownColorPolicy::kMapToZero);
  std::size_t size() const override { return manifest_.pairs.size(); }
  SegmentationSample load(std::size_t index) const override;
  const DatasetManifest& manifest() const { return manifest_; }
  const LabelPalette& palette() const { return palette_; }

 private:
  DatasetManifest manifest_;
  LabelPalette palette_;
  UnknownColorPolicy policy_;
};

class InMemorySource : public SampleSource {
 public:
  explicit InMemorySource(std::vector<SegmentationSample> samples);
  std::size_t size() const override { return samples_.size(); }
  SegmentationSample load(std::size_t index) const override;

 private:
  std::vector<SegmentationSample> samples_;
};

struct BatchOptions {
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  std::size_t resize_h = 0, resize_w = 0;  // 0: keep; otherwise multiples of 32
  bool shuffle = true;
};

struct Batch {
  Tensor images;  // N x 3 x H x W
  Tensor onehot;  // N x C x H x W
  std::vector<int> labels;            // N*H*W
  std::vector<std::size_t> indices;   // sample indices, delivery order
  std::size_t size() const { return indices.size(); }
};

// Sample order for an epoch: Fisher-Yates over the identity driven by
// (seed, epoch), or the identity when shuffling is off.
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch, bool shuffle);

// Streams the batches of one epoch. A background thread decodes ahead with
// at most two finished batches buffered; delivery order is always the
// shuffled order. The last batch may be short.
class BatchIterator {
 public:
  BatchIterator(const SampleSource& source, std::size_t num_classes, BatchOptions options,
                std::size_t epoch = 0);
  ~BatchIterator();
  BatchIterator(const BatchIterator&) = delete;
  BatchIterator& operator=(const BatchIterator&) = delete;

  // Rethrows decode errors in order of delivery.
  std::optional<Batch> next();
  std::size_t batch_count() const { return batch_count_; }
  const std::vector<std::size_t>& order() const { return order_; }

 private:
  struct Slot {
    std::optional<Batch> batch;
    std::exception_ptr error;
  };
  void produce();
  Batch assemble(std::size_t b) const;

  const SampleSource& source_;
  std::size_t num_classes_;
  BatchOptions options_;
  std::vector<std::size_t> order_;
  std::size_t batch_count_ = 0;
  std::size_t delivered_ = 0;

  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Slot> ready_;
  bool stop_ = false;
  std::thread worker_;
};

inline constexpr std::size_t kMaxBatchesInFlight = 2;

}  // namespace segkit::data
