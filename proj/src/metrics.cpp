#include "pathseg/metrics.hpp"

#include <algorithm>

namespace pathseg {

std::int64_t ConfusionMatrix::counted() const {
  std::int64_t s = 0;
  for (auto v : counts) s += v;
  return s;
}

ConfusionMatrix& ConfusionMatrix::merge(const ConfusionMatrix& other) {
  require(other.num_classes == num_classes, ErrorKind::Shape, "cannot merge confusion matrices of different K");
  for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
  ignored_pixels += other.ignored_pixels;
  return *this;
}

void accumulate(ConfusionMatrix& cm, const SegmentationMask& pred, const SegmentationMask& truth) {
  require(pred.height == truth.height && pred.width == truth.width, ErrorKind::Shape,
          "prediction and truth masks differ in shape");
  const auto K = static_cast<std::int32_t>(cm.num_classes);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const auto t = truth.classes[i];
    const auto p = pred.classes[i];
    require(p != pred.ignore_index, ErrorKind::Validation, "prediction contains the ignore index");
    if (t == truth.ignore_index) {
      ++cm.ignored_pixels;
      continue;
    }
    require(t >= 0 && t < K && p >= 0 && p < K, ErrorKind::Validation, "class id outside [0, K)");
    ++cm.at(static_cast<std::size_t>(t), static_cast<std::size_t>(p));
  }
}

F1Average parse_f1_average(const std::string& s) {
  if (s == "macro") return F1Average::Macro;
  if (s == "micro") return F1Average::Micro;
  if (s == "weighted") return F1Average::Weighted;
  fail(ErrorKind::Config, "unknown F1 averaging '" + s + "' (macro | micro | weighted)");
}

std::string to_string(F1Average a) {
  switch (a) {
    case F1Average::Macro: return "macro";
    case F1Average::Micro: return "micro";
    case F1Average::Weighted: return "weighted";
  }
  return "macro";
}

MetricsReport report(const ConfusionMatrix& cm, const MetricsOptions& options) {
  const std::size_t K = cm.num_classes;
  const std::int64_t total = cm.counted();
  require(total > 0, ErrorKind::Undefined, "no counted pixels; metrics are undefined");

  MetricsReport r;
  r.counted_pixels = total;
  r.ignored_pixels = cm.ignored_pixels;
  r.present.assign(K, false);
  r.iou.assign(K, 0.0);
  r.dice.assign(K, 0.0);
  r.precision.assign(K, 0.0);
  r.recall.assign(K, 0.0);

  std::int64_t trace = 0;
  std::vector<std::int64_t> support(K, 0);
  double iou_sum = 0.0, dice_sum = 0.0, p_sum = 0.0, rec_sum = 0.0;
  std::size_t n_present = 0, n_dice = 0;
  for (std::size_t c = 0; c < K; ++c) {
    const std::int64_t tp = cm.at(c, c);
    std::int64_t fn = 0, fp = 0;
    for (std::size_t j = 0; j < K; ++j) {
      if (j == c) continue;
      fn += cm.at(c, j);
      fp += cm.at(j, c);
    }
    trace += tp;
    support[c] = tp + fn;
    if (tp + fn + fp == 0) continue;
    r.present[c] = true;
    const auto d = [](std::int64_t v) { return static_cast<double>(v); };
    r.iou[c] = d(tp) / d(tp + fp + fn);
    r.dice[c] = 2.0 * d(tp) / d(2 * tp + fp + fn);
    r.precision[c] = tp + fp > 0 ? d(tp) / d(tp + fp) : 0.0;
    r.recall[c] = tp + fn > 0 ? d(tp) / d(tp + fn) : 0.0;
    ++n_present;
    iou_sum += r.iou[c];
    p_sum += r.precision[c];
    rec_sum += r.recall[c];
    const bool excluded = std::find(options.dice_exclude.begin(), options.dice_exclude.end(),
                                    static_cast<int>(c)) != options.dice_exclude.end();
    if (!excluded) {
      dice_sum += r.dice[c];
      ++n_dice;
    }
  }
  r.accuracy = static_cast<double>(trace) / static_cast<double>(total);
  r.miou = iou_sum / static_cast<double>(n_present);
  r.mean_dice = n_dice ? dice_sum / static_cast<double>(n_dice) : 0.0;
  switch (options.f1) {
    case F1Average::Macro: {
      const double mp = p_sum / static_cast<double>(n_present);
      const double mr = rec_sum / static_cast<double>(n_present);
      r.f1 = mp + mr > 0.0 ? 2.0 * mp * mr / (mp + mr) : 0.0;
      break;
    }
    case F1Average::Micro:
      r.f1 = r.accuracy;
      break;
    case F1Average::Weighted: {
      double acc = 0.0;
      for (std::size_t c = 0; c < K; ++c) acc += static_cast<double>(support[c]) * r.dice[c];
      r.f1 = acc / static_cast<double>(total);
      break;
    }
  }
  return r;
}

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json j;
  j["accuracy"] = accuracy;
  j["dice"] = mean_dice;
  j["miou"] = miou;
  j["f1"] = f1;
  j["counted_pixels"] = counted_pixels;
  j["ignored_pixels"] = ignored_pixels;
  auto per = [&](const std::vector<double>& v) {
    nlohmann::json a = nlohmann::json::array();
    for (std::size_t c = 0; c < v.size(); ++c) a.push_back(present[c] ? nlohmann::json(v[c]) : nlohmann::json());
    return a;
  };
  j["per_class"] = {{"iou", per(iou)}, {"dice", per(dice)}, {"precision", per(precision)}, {"recall", per(recall)}};
  return j;
}

}  // namespace pathseg
