#include "segkit/metrics.hpp"

#include "segkit/error.hpp"

namespace segkit::metrics {

ConfusionMatrix::ConfusionMatrix(std::size_t num_classes)
    : classes_(num_classes), counts_(num_classes * num_classes, 0) {
  if (num_classes == 0) fail(Errc::kBadConfig, "confusion matrix needs at least one class");
}

void ConfusionMatrix::accumulate(std::span<const int> predicted, std::span<const int> truth) {
  if (predicted.size() != truth.size()) {
    fail(Errc::kShapeMismatch, "prediction has " + std::to_string(predicted.size()) +
                                   " pixels, labels " + std::to_string(truth.size()));
  }
  const auto c = static_cast<int>(classes_);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const int t = truth[i], p = predicted[i];
    if (t < 0 || t >= c || p < 0 || p >= c) {
      fail(Errc::kLabelOutOfRange, "label " + std::to_string(t < 0 || t >= c ? t : p) +
                                       " outside [0, " + std::to_string(c) + ")");
    }
  }
  for (std::size_t i = 0; i < truth.size(); ++i) {
    ++counts_[static_cast<std::size_t>(truth[i]) * classes_ + static_cast<std::size_t>(predicted[i])];
  }
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  if (other.classes_ != classes_) fail(Errc::kClassCountMismatch, "merging confusion matrices");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  return *this;
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t n = 0;
  for (auto v : counts_) n += v;
  return n;
}

std::uint64_t ConfusionMatrix::true_positives(std::size_t c) const { return at(c, c); }

std::uint64_t ConfusionMatrix::false_positives(std::size_t c) const {
  std::uint64_t n = 0;
  for (std::size_t t = 0; t < classes_; ++t)
    if (t != c) n += at(t, c);
  return n;
}

std::uint64_t ConfusionMatrix::false_negatives(std::size_t c) const {
  std::uint64_t n = 0;
  for (std::size_t p = 0; p < classes_; ++p)
    if (p != c) n += at(c, p);
  return n;
}

ConfusionMatrix confusion(std::span<const int> predicted, std::span<const int> truth,
                          std::size_t num_classes) {
  ConfusionMatrix cm(num_classes);
  cm.accumulate(predicted, truth);
  return cm;
}

AbsentClassPolicy parse_absent_class_policy(std::string_view name) {
  if (name == "exclude") return AbsentClassPolicy::kExclude;
  if (name == "zero") return AbsentClassPolicy::kZero;
  fail(Errc::kBadConfig, "absent_class_policy must be exclude or zero, got '" +
                             std::string(name) + "'");
}

std::string_view to_string(AbsentClassPolicy policy) {
  return policy == AbsentClassPolicy::kZero ? "zero" : "exclude";
}

std::vector<std::optional<double>> iou_per_class(const ConfusionMatrix& cm) {
  std::vector<std::optional<double>> out(cm.num_classes());
  for (std::size_t c = 0; c < cm.num_classes(); ++c) {
    const auto tp = cm.true_positives(c);
    const auto den = tp + cm.false_positives(c) + cm.false_negatives(c);
    if (den > 0) out[c] = static_cast<double>(tp) / static_cast<double>(den);
  }
  return out;
}

std::vector<std::optional<double>> f1_per_class(const ConfusionMatrix& cm) {
  std::vector<std::optional<double>> out(cm.num_classes());
  for (std::size_t c = 0; c < cm.num_classes(); ++c) {
    const auto tp = cm.true_positives(c);
    const auto den = 2 * tp + cm.false_positives(c) + cm.false_negatives(c);
    if (den > 0) out[c] = 2.0 * static_cast<double>(tp) / static_cast<double>(den);
  }
  return out;
}

namespace {

double average(const std::vector<std::optional<double>>& values, AbsentClassPolicy policy,
               const char* what) {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& v : values) {
    if (v) {
      total += *v;
      ++n;
    } else if (policy == AbsentClassPolicy::kZero) {
      ++n;
    }
  }
  if (n == 0) fail(Errc::kAllUndefined, std::string(what) + ": no class is defined");
  return total / static_cast<double>(n);
}

}  // namespace

double mean_iou(const ConfusionMatrix& cm, AbsentClassPolicy policy) {
  return average(iou_per_class(cm), policy, "mean_iou");
}

double pixel_accuracy(const ConfusionMatrix& cm) {
  const auto total = cm.total();
  if (total == 0) fail(Errc::kEmptyMatrix, "pixel accuracy of an empty confusion matrix");
  std::uint64_t trace = 0;
  for (std::size_t c = 0; c < cm.num_classes(); ++c) trace += cm.true_positives(c);
  return static_cast<double>(trace) / static_cast<double>(total);
}

double f1_score(const ConfusionMatrix& cm, AbsentClassPolicy policy) {
  return average(f1_per_class(cm), policy, "f1_score");
}

double thresholded_score(ScoreKind kind, const Tensor& probabilities,
                         const Tensor& target_onehot, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) {
    fail(Errc::kBadThreshold, "threshold " + std::to_string(threshold) + " outside (0, 1)");
  }
  if (probabilities.shape() != target_onehot.shape()) {
    fail(Errc::kShapeMismatch, "thresholded_score: " + shape_str(probabilities.shape()) +
                                   " vs " + shape_str(target_onehot.shape()));
  }
  if (probabilities.rank() != 3 && probabilities.rank() != 4) {
    fail(Errc::kShapeMismatch, "thresholded_score expects C x H x W or N x C x H x W");
  }
  const bool batched = probabilities.rank() == 4;
  const std::size_t n = batched ? probabilities.dim(0) : 1;
  const std::size_t c = probabilities.dim(batched ? 1 : 0);
  const std::size_t plane = probabilities.numel() / (n * c);
  const auto p = probabilities.data();
  const auto y = target_onehot.data();

  double total = 0.0;
  std::size_t defined = 0;
  for (std::size_t k = 0; k < c; ++k) {
    std::uint64_t tp = 0, fp = 0, fn = 0;
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t q = 0; q < plane; ++q) {
        const std::size_t i = (b * c + k) * plane + q;
        const bool pred = p[i] >= threshold;
        const bool truth = y[i] >= 0.5;
        tp += pred && truth;
        fp += pred && !truth;
        fn += !pred && truth;
      }
    const std::uint64_t den = kind == ScoreKind::kIou ? tp + fp + fn : 2 * tp + fp + fn;
    if (den == 0) continue;
    const double num = kind == ScoreKind::kIou ? static_cast<double>(tp) : 2.0 * static_cast<double>(tp);
    total += num / static_cast<double>(den);
    ++defined;
  }
  if (defined == 0) fail(Errc::kAllUndefined, "thresholded_score: no channel is defined");
  return total / static_cast<double>(defined);
}

MetricsReport make_report(const ConfusionMatrix& cm, double loss, AbsentClassPolicy policy) {
  MetricsReport r;
  r.per_class_iou = iou_per_class(cm);
  r.pixel_accuracy = pixel_accuracy(cm);
  bool any = false;
  for (const auto& v : r.per_class_iou) any = any || v.has_value();
  if (any || policy == AbsentClassPolicy::kZero) {
    r.mean_iou = mean_iou(cm, policy);
    r.f1_macro = f1_score(cm, policy);
  }
  r.loss = loss;
  return r;
}

}  // namespace segkit::metrics
