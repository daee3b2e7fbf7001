#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "pathseg/mask.hpp"

namespace pathseg {

/// K x K pixel tally, rows = ground truth, columns = prediction.
struct ConfusionMatrix {
  std::size_t num_classes = 0;
  std::vector<std::int64_t> counts;
  std::int64_t ignored_pixels = 0;

  explicit ConfusionMatrix(std::size_t k = 0) : num_classes(k), counts(k * k, 0) {}

  std::int64_t& at(std::size_t truth, std::size_t pred) { return counts[truth * num_classes + pred]; }
  std::int64_t at(std::size_t truth, std::size_t pred) const { return counts[truth * num_classes + pred]; }
  std::int64_t counted() const;
  /// Element-wise sum; associative and commutative.
  ConfusionMatrix& merge(const ConfusionMatrix& other);

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

/// Adds one prediction/truth pair. Truth pixels equal to the ignore index only
/// bump ignored_pixels. A prediction equal to the ignore index is a
/// validation error.
void accumulate(ConfusionMatrix& cm, const SegmentationMask& pred, const SegmentationMask& truth);

enum class F1Average { Macro, Micro, Weighted };
F1Average parse_f1_average(const std::string& s);
std::string to_string(F1Average a);

struct MetricsOptions {
  /// macro: harmonic mean of macro precision and macro recall.
  /// micro: pooled TP / pooled (TP + FP), i.e. pixel accuracy.
  /// weighted: per-class F1 weighted by ground-truth support.
  F1Average f1 = F1Average::Macro;
  /// Classes left out of the mean Dice (still reported per class).
  std::vector<int> dice_exclude;
};

struct MetricsReport {
  double accuracy = 0.0;
  double mean_dice = 0.0;
  double miou = 0.0;
  double f1 = 0.0;
  /// A class is present when it occurs in the ground truth or the prediction;
  /// absent classes report 0 and are excluded from every mean.
  std::vector<bool> present;
  std::vector<double> iou, dice, precision, recall;
  std::int64_t counted_pixels = 0;
  std::int64_t ignored_pixels = 0;

  nlohmann::json to_json() const;
};

/// Throws ErrorKind::Undefined when no pixel was counted.
MetricsReport report(const ConfusionMatrix& cm, const MetricsOptions& options = {});

}  // namespace pathseg
