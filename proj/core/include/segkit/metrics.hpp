#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "segkit/tensor.hpp"

namespace segkit::metrics {

// counts[t][p]: pixels of true class t predicted as p.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t num_classes);

  // Throws kShapeMismatch on length mismatch, kLabelOutOfRange for labels
  // outside [0, C).
  void accumulate(std::span<const int> predicted, std::span<const int> truth);
  ConfusionMatrix& operator+=(const ConfusionMatrix& other);

  std::size_t num_classes() const { return classes_; }
  std::uint64_t at(std::size_t truth, std::size_t predicted) const {
    return counts_[truth * classes_ + predicted];
  }
  std::uint64_t total() const;
  std::uint64_t true_positives(std::size_t c) const;
  std::uint64_t false_positives(std::size_t c) const;  // column sum minus TP
  std::uint64_t false_negatives(std::size_t c) const;  // row sum minus TP

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t classes_;
  std::vector<std::uint64_t> counts_;
};

ConfusionMatrix confusion(std::span<const int> predicted, std::span<const int> truth,
                          std::size_t num_classes);

// What to do with a class whose TP + FP + FN is zero.
enum class AbsentClassPolicy { kExclude, kZero };
AbsentClassPolicy parse_absent_class_policy(std::string_view name);
std::string_view to_string(AbsentClassPolicy policy);

// nullopt marks an undefined class (zero denominator).
std::vector<std::optional<double>> iou_per_class(const ConfusionMatrix& cm);
std::vector<std::optional<double>> f1_per_class(const ConfusionMatrix& cm);

// Throws kAllUndefined when no class is defined (exclude policy).
double mean_iou(const ConfusionMatrix& cm,
                AbsentClassPolicy policy = AbsentClassPolicy::kExclude);
// Throws kEmptyMatrix when the matrix holds no pixels.
double pixel_accuracy(const ConfusionMatrix& cm);
// Macro average over defined classes.
double f1_score(const ConfusionMatrix& cm,
                AbsentClassPolicy policy = AbsentClassPolicy::kExclude);

enum class ScoreKind { kIou, kF1 };

// Binarises probabilities per channel (p >= threshold is positive), then
// averages the per-channel binary score over channels where it is defined.
// Tensors are N x C x H x W or C x H x W. Throws kBadThreshold outside (0, 1).
double thresholded_score(ScoreKind kind, const Tensor& probabilities,
                         const Tensor& target_onehot, double threshold = 0.5);

struct MetricsReport {
  std::vector<std::optional<double>> per_class_iou;
  std::optional<double> mean_iou;  // nullopt when every class is undefined
  double pixel_accuracy = 0.0;
  std::optional<double> f1_macro;
  double loss = 0.0;
  std::optional<double> iou_score;  // thresholded
  std::optional<double> f_score;    // thresholded
};

MetricsReport make_report(const ConfusionMatrix& cm, double loss,
                          AbsentClassPolicy policy = AbsentClassPolicy::kExclude);

}  // namespace segkit::metrics
