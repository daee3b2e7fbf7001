#include "pathseg/training.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "pathseg/random.hpp"

namespace pathseg {

ClassWeights class_weights_from_counts(std::span<const std::int64_t> counts) {
  ClassWeights w;
  w.pixel_counts.assign(counts.begin(), counts.end());
  w.total = std::accumulate(counts.begin(), counts.end(), std::int64_t{0});
  require(w.total > 0, ErrorKind::DegenerateData, "no non-ignore pixels to derive class weights from");
  w.weights.resize(counts.size());
  std::size_t seen = 0;
  for (std::size_t c = 0; c < counts.size(); ++c) {
    w.weights[c] = 1.0 - static_cast<double>(counts[c]) / static_cast<double>(w.total);
    seen += counts[c] > 0;
  }
  if (seen == 1) {
    w.degenerate = true;
    spdlog::warn("only one class occurs in the training masks; every class weight is 0");
  }
  return w;
}

ClassWeights compute_class_weights(std::span<const SegmentationMask> masks, int num_classes) {
  require(!masks.empty(), ErrorKind::DegenerateData, "no masks to derive class weights from");
  require(num_classes >= 1, ErrorKind::Parameter, "K must be positive");
  std::vector<std::int64_t> counts(static_cast<std::size_t>(num_classes), 0);
  for (const auto& m : masks) {
    for (auto v : m.classes) {
      if (v == m.ignore_index) continue;
      require(v >= 0 && v < num_classes, ErrorKind::Validation, "mask id outside [0, K)");
      ++counts[static_cast<std::size_t>(v)];
    }
  }
  return class_weights_from_counts(counts);
}

ClassWeights uniform_class_weights(int num_classes, double value) {
  ClassWeights w;
  w.weights.assign(static_cast<std::size_t>(num_classes), value);
  w.pixel_counts.assign(static_cast<std::size_t>(num_classes), 0);
  return w;
}

double weighted_ce_loss(const ClassScores& scores, std::span<const SegmentationMask> targets,
                        const std::vector<double>& weights, Tensor* dlogits) {
  const Tensor& z = scores.logits;
  const std::size_t K = z.c();
  require(targets.size() == z.n(), ErrorKind::Shape, "one target mask per batch item required");
  require(weights.size() == K, ErrorKind::Shape, "weight vector length != K");
  for (const auto& t : targets)
    require(t.height == z.h() && t.width == z.w(), ErrorKind::Shape,
            "target " + std::to_string(t.height) + "x" + std::to_string(t.width) + " vs logits " + z.shape_string());

  const std::size_t hw = z.h() * z.w();
  std::size_t valid = 0;
  for (const auto& t : targets)
    for (auto v : t.classes) valid += v != t.ignore_index;
  require(valid > 0, ErrorKind::Undefined, "every pixel is ignored; loss undefined");

  if (dlogits) *dlogits = Tensor(z.n(), z.h(), z.w(), K);
  const double inv = 1.0 / static_cast<double>(valid);
  std::vector<double> p(K);
  double total = 0.0;
  const double* src = z.values().data();
  for (std::size_t b = 0; b < z.n(); ++b) {
    const auto& t = targets[b];
    for (std::size_t i = 0; i < hw; ++i) {
      const int y = t.classes[i];
      if (y == t.ignore_index) continue;
      require(y >= 0 && static_cast<std::size_t>(y) < K, ErrorKind::Validation, "target id outside [0, K)");
      const double* row = src + (b * hw + i) * K;
      const double m = *std::max_element(row, row + K);
      double s = 0.0;
      for (std::size_t c = 0; c < K; ++c) s += p[c] = std::exp(row[c] - m);
      const double w = weights[static_cast<std::size_t>(y)];
      total += w * (std::log(s) - (row[y] - m));
      if (dlogits) {
        double* g = dlogits->values().data() + (b * hw + i) * K;
        const double scale = w * inv / s;
        for (std::size_t c = 0; c < K; ++c) g[c] = scale * p[c];
        g[y] -= w * inv;
      }
    }
  }
  return total * inv;
}

void TrainConfig::validate() const {
  require(std::isfinite(learning_rate) && learning_rate >= 0.0, ErrorKind::Parameter, "learning rate must be >= 0");
  require(steps > 0, ErrorKind::Parameter, "steps must be positive");
  require(batch_size > 0, ErrorKind::Parameter, "batch size must be positive");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"learning_rate", learning_rate}, {"beta1", beta1}, {"beta2", beta2}, {"epsilon", epsilon},
          {"steps", steps},           {"batch_size", batch_size}, {"seed", seed}, {"timestep", timestep},
          {"blocks", blocks}};
}

std::string TrainingLog::to_jsonl() const {
  std::ostringstream os;
  for (const auto& r : records) os << r.dump() << '\n';
  return os.str();
}

void TrainingLog::write(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorKind::Io, "cannot write " + path.string());
  out << to_jsonl();
}

ConfusionMatrix evaluate_head(const SegmentationHead& head, const FeatureSet& set,
                              std::vector<SegmentationMask>* predictions) {
  ConfusionMatrix cm(head.config().num_classes);
  for (std::size_t i = 0; i < set.size(); ++i) {
    SegmentationMask pred = predict_mask(head.forward(set.features[i]));
    pred.ignore_index = set.masks[i].ignore_index;
    accumulate(cm, pred, set.masks[i]);
    if (predictions) predictions->push_back(std::move(pred));
  }
  return cm;
}

TrainResult train_head(SegmentationHead& head, const FeatureSet& train, const FeatureSet* validation,
                       const ClassWeights& weights, const TrainConfig& config, const MetricsOptions& metrics,
                       const TrainHooks& hooks) {
  config.validate();
  require(train.size() > 0, ErrorKind::DegenerateData, "empty training set");
  require(train.masks.size() == train.size(), ErrorKind::Shape, "features and masks differ in count");
  const bool have_val = validation && validation->size() > 0;
  if (!have_val) spdlog::warn("no validation split; per-epoch metrics skipped");

  TrainResult result;
  nn::Adam adam(config.learning_rate, config.beta1, config.beta2, config.epsilon);
  Rng rng(derive_seed({config.seed, 0x5eed0f0dull}));
  std::vector<std::size_t> order(train.size());
  double best_dice = -1.0;

  int step = 0;
  while (step < config.steps) {
    ++result.epochs;
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    int epoch_steps = 0;
    for (std::size_t start = 0; start < order.size() && step < config.steps; start += config.batch_size) {
      const std::size_t end = std::min(start + config.batch_size, order.size());
      std::vector<Tensor> xs;
      std::vector<SegmentationMask> ys;
      for (std::size_t k = start; k < end; ++k) {
        xs.push_back(train.features[order[k]]);
        ys.push_back(train.masks[order[k]]);
      }
      SegmentationHead::Trace trace;
      head.zero_grad();
      const ClassScores scores = head.forward_train(stack(xs), trace);
      Tensor dlogits;
      const double loss = weighted_ce_loss(scores, ys, weights.weights, &dlogits);
      if (!std::isfinite(loss)) {
        fail(ErrorKind::Runtime, "non-finite loss at step " + std::to_string(step + 1) + " (epoch " +
                                     std::to_string(result.epochs) + ", lr " + std::to_string(config.learning_rate) +
                                     ")");
      }
      head.backward(trace, dlogits);
      adam.step(head.params());
      ++step;
      ++epoch_steps;
      epoch_loss += loss;
      result.step_losses.push_back(loss);
      result.log.records.push_back(
          {{"type", "step"}, {"step", step}, {"epoch", result.epochs}, {"loss", loss}, {"lr", config.learning_rate}});
    }

    nlohmann::json rec{{"type", "epoch"}, {"epoch", result.epochs}, {"step", step},
                       {"mean_loss", epoch_loss / std::max(epoch_steps, 1)}};
    if (have_val) {
      MetricsReport r = report(evaluate_head(head, *validation), metrics);
      rec["validation"] = r.to_json();
      if (r.mean_dice > best_dice) {
        best_dice = r.mean_dice;
        result.best_epoch = result.epochs;
        result.best_validation = r;
      }
      result.final_validation = std::move(r);
    }
    result.log.records.push_back(std::move(rec));
    if (hooks.on_epoch_end) hooks.on_epoch_end(result.epochs, head);
  }

  nlohmann::json summary{{"type", "summary"}, {"steps", step}, {"epochs", result.epochs},
                         {"last_epoch", result.epochs}, {"final_loss", result.step_losses.back()}};
  summary["best_epoch"] = result.best_epoch > 0 ? nlohmann::json(result.best_epoch) : nlohmann::json();
  result.log.records.push_back(std::move(summary));
  return result;
}

FeatureSet extract_feature_set(const Backbone& backbone, const NoiseSchedule& schedule,
                               std::span<const LabeledImage> items, const PipelineOptions& pipeline,
                               int timestep, const std::vector<std::string>& blocks, std::uint64_t seed) {
  FeatureOptions fo;
  fo.timestep = timestep;
  fo.blocks = blocks;
  fo.seed = seed;
  fo.feature_size = pipeline.feature_size;
  std::optional<FeatureCache> cache;
  if (!pipeline.cache_dir.empty()) cache.emplace(pipeline.cache_dir);
  FeatureSet set;
  for (const auto& item : items) {
    FeatureMap fm = extract_grid_features(backbone, schedule, item.image, pipeline.grid, fo, hash_string(item.id),
                                          cache ? &*cache : nullptr);
    set.ids.push_back(item.id);
    set.features.push_back(std::move(fm.values));
    set.masks.push_back(item.mask);
  }
  return set;
}

TrainResult train_head(const Dataset& dataset, const Backbone& backbone, SegmentationHead& head,
                       const TrainConfig& config, const PipelineOptions& pipeline) {
  require(backbone.frozen(), ErrorKind::Validation, "backbone must be frozen before head training");
  const std::uint64_t before = backbone.weight_hash();
  const NoiseSchedule schedule = build_schedule(1000, 1e-4, 0.02);
  const auto& train_items = dataset.split("train");
  require(!train_items.empty(), ErrorKind::DegenerateData, "empty training split");
  FeatureSet train = extract_feature_set(backbone, schedule, train_items, pipeline, config.timestep, config.blocks,
                                         config.seed);
  std::optional<FeatureSet> val;
  if (auto it = dataset.splits.find("val"); it != dataset.splits.end() && !it->second.empty())
    val = extract_feature_set(backbone, schedule, it->second, pipeline, config.timestep, config.blocks, config.seed);
  const ClassWeights w = compute_class_weights(train.masks, dataset.num_classes);
  TrainResult r = train_head(head, train, val ? &*val : nullptr, w, config);
  require(backbone.weight_hash() == before, ErrorKind::Runtime, "backbone weights changed during head training");
  return r;
}

}  // namespace pathseg
