#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "pathseg/backbone.hpp"
#include "pathseg/data.hpp"
#include "pathseg/head.hpp"
#include "pathseg/metrics.hpp"
#include "pathseg/patch_grid.hpp"

namespace pathseg {

/// Per-class loss weights W_c = 1 - N_c / N over non-ignore pixels. The
/// ignore value carries an implicit weight of 0.
struct ClassWeights {
  std::vector<double> weights;
  std::vector<std::int64_t> pixel_counts;
  std::int64_t total = 0;
  /// Only one class occurs, so every weight is 0.
  bool degenerate = false;
};

/// Throws ErrorKind::DegenerateData when no non-ignore pixel exists.
ClassWeights compute_class_weights(std::span<const SegmentationMask> masks, int num_classes);
ClassWeights class_weights_from_counts(std::span<const std::int64_t> counts);
ClassWeights uniform_class_weights(int num_classes, double value = 1.0);

/// Mean over non-ignore pixels of w[target] * -log softmax(logits)[target].
/// `targets` holds one mask per batch item. When `dlogits` is given it
/// receives dL/dlogits. Throws ErrorKind::Undefined if every pixel is ignored.
double weighted_ce_loss(const ClassScores& scores, std::span<const SegmentationMask> targets,
                        const std::vector<double>& weights, Tensor* dlogits = nullptr);

struct TrainConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int steps = 200;
  std::size_t batch_size = 2;
  std::uint64_t seed = 0;
  int timestep = 50;
  std::vector<std::string> blocks{"all"};

  /// Parameter error for a negative learning rate, non-positive steps or
  /// batch size. lr == 0 is accepted (a no-op run).
  void validate() const;
  nlohmann::json to_json() const;
};

/// Line-delimited JSON records: {"type":"step",...}, {"type":"epoch",...},
/// and one closing {"type":"summary",...}.
struct TrainingLog {
  std::vector<nlohmann::json> records;

  std::string to_jsonl() const;
  void write(const std::filesystem::path& path) const;
};

/// Precomputed head inputs paired with their masks.
struct FeatureSet {
  std::vector<std::string> ids;
  std::vector<Tensor> features;  // each (1, h, w, C)
  std::vector<SegmentationMask> masks;

  std::size_t size() const { return features.size(); }
};

struct TrainHooks {
  /// After every epoch, with the epoch number (1-based).
  std::function<void(int, const SegmentationHead&)> on_epoch_end;
};

struct TrainResult {
  TrainingLog log;
  std::vector<double> step_losses;
  int epochs = 0;
  /// Epoch with the best validation mean Dice; 0 when no validation ran.
  int best_epoch = 0;
  std::optional<MetricsReport> final_validation;
  std::optional<MetricsReport> best_validation;
};

/// Adam on the head only. Each epoch visits the training set in a seeded
/// random order; a batch never spans two epochs. An empty or absent
/// validation set skips metrics with a warning. A non-finite loss aborts with
/// ErrorKind::Runtime.
TrainResult train_head(SegmentationHead& head, const FeatureSet& train, const FeatureSet* validation,
                       const ClassWeights& weights, const TrainConfig& config, const MetricsOptions& metrics = {},
                       const TrainHooks& hooks = {});

/// Inference-mode predictions for every item, accumulated into one matrix.
/// Predicted masks are appended to `predictions` when given.
ConfusionMatrix evaluate_head(const SegmentationHead& head, const FeatureSet& set,
                              std::vector<SegmentationMask>* predictions = nullptr);

struct PipelineOptions {
  GridConfig grid{};
  std::size_t feature_size = 0;
  /// Optional on-disk feature cache directory.
  std::filesystem::path cache_dir;
};

/// Frozen-backbone features for every image of one split.
FeatureSet extract_feature_set(const Backbone& backbone, const NoiseSchedule& schedule,
                               std::span<const LabeledImage> items, const PipelineOptions& pipeline,
                               int timestep, const std::vector<std::string>& blocks, std::uint64_t seed);

/// Extracts features with the frozen backbone, derives frequency weights from
/// the training split and trains the head. Throws ErrorKind::Validation if the
/// backbone is not frozen and ErrorKind::Runtime if its weights change.
TrainResult train_head(const Dataset& dataset, const Backbone& backbone, SegmentationHead& head,
                       const TrainConfig& config, const PipelineOptions& pipeline = {});

}  // namespace pathseg
