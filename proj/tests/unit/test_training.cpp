#include <cmath>
#include <numeric>

#include "doctest.h"
#include "pathseg/training.hpp"
#include "test_util.hpp"

using namespace pathseg;

namespace {

// Straight per-pixel loop: sum_i w[y_i] * -log softmax(z_i)[y_i] / #non-ignore.
double loss_oracle(const Tensor& z, const std::vector<SegmentationMask>& t, const std::vector<double>& w) {
  double sum = 0;
  std::size_t n = 0;
  for (std::size_t b = 0; b < z.n(); ++b)
    for (std::size_t y = 0; y < z.h(); ++y)
      for (std::size_t x = 0; x < z.w(); ++x) {
        const int c = t[b].at(y, x);
        if (c == t[b].ignore_index) continue;
        double denom = 0;
        for (std::size_t k = 0; k < z.c(); ++k) denom += std::exp(z.at(b, y, x, k));
        sum += w[c] * -(z.at(b, y, x, c) - std::log(denom));
        ++n;
      }
  return sum / static_cast<double>(n);
}

FeatureSet toy_feature_set(std::size_t n, std::size_t side, std::size_t channels, int k, Rng& rng) {
  // Features carry the class one-hot plus noise, so the head can learn them.
  FeatureSet fs;
  std::uniform_int_distribution<int> cls(0, k - 1);
  std::normal_distribution<double> nd(0.0, 0.3);
  for (std::size_t i = 0; i < n; ++i) {
    SegmentationMask m(side * 2, side * 2, k);
    Tensor f(1, side, side, channels);
    for (std::size_t y = 0; y < side; ++y)
      for (std::size_t x = 0; x < side; ++x) {
        const int c = (x < side / 2) ? cls(rng) % k : (static_cast<int>(y) * k) / static_cast<int>(side);
        for (std::size_t ch = 0; ch < channels; ++ch)
          f.at(0, y, x, ch) = (static_cast<int>(ch % k) == c ? 1.0 : 0.0) + nd(rng);
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) m.at(2 * y + dy, 2 * x + dx) = c;
      }
    fs.ids.push_back("img" + std::to_string(i));
    fs.features.push_back(std::move(f));
    fs.masks.push_back(std::move(m));
  }
  return fs;
}

HeadConfig toy_head(std::size_t side, std::size_t channels, int k) {
  HeadConfig c;
  c.in_channels = channels;
  c.num_classes = k;
  c.widths = {8, 8, 8};
  c.first_kernel = 1;
  c.input_size = side;
  c.output_size = side * 2;
  c.seed = 1;
  return c;
}

}  // namespace

TEST_SUITE("training") {
  TEST_CASE("class weights from counts") {
    const std::vector<std::int64_t> counts{75, 25};
    const auto w = class_weights_from_counts(counts);
    CHECK(w.weights[0] == doctest::Approx(0.25).epsilon(1e-15));
    CHECK(w.weights[1] == doctest::Approx(0.75).epsilon(1e-15));
    CHECK(w.total == 100);
    CHECK_FALSE(w.degenerate);

    const std::vector<std::int64_t> single{0, 40, 0};
    const auto d = class_weights_from_counts(single);
    CHECK(d.degenerate);
    CHECK(d.weights[1] == 0.0);

    const std::vector<std::int64_t> none{0, 0};
    test::check_kind(ErrorKind::DegenerateData, [&] { class_weights_from_counts(none); });
  }

  TEST_CASE("class weights from masks ignore the don't-care value") {
    SegmentationMask m(10, 10, 2);  // ignore index 2
    for (std::size_t i = 0; i < 100; ++i) m.classes[i] = i < 60 ? 0 : (i < 80 ? 1 : 2);
    const std::vector<SegmentationMask> masks{m};
    const auto w = compute_class_weights(masks, 2);
    CHECK(w.total == 80);
    CHECK(w.pixel_counts == std::vector<std::int64_t>{60, 20});
    CHECK(w.weights[0] == doctest::Approx(0.25));
    CHECK(w.weights[1] == doctest::Approx(0.75));
    SegmentationMask all_ignored(4, 4, 2, 2);
    const std::vector<SegmentationMask> bad{all_ignored};
    test::check_kind(ErrorKind::DegenerateData, [&] { compute_class_weights(bad, 2); });
  }

  TEST_CASE("property: rarer class gets a strictly larger weight") {
    Rng rng(3);
    std::uniform_int_distribution<std::int64_t> cnt(0, 1000);
    for (int trial = 0; trial < 200; ++trial) {
      std::vector<std::int64_t> counts(5);
      for (auto& c : counts) c = cnt(rng);
      if (std::accumulate(counts.begin(), counts.end(), std::int64_t{0}) == 0) continue;
      const auto w = class_weights_from_counts(counts);
      for (std::size_t a = 0; a < 5; ++a)
        for (std::size_t b = 0; b < 5; ++b)
          if (counts[a] < counts[b]) CHECK(w.weights[a] > w.weights[b]);
      for (double v : w.weights) CHECK((v >= 0.0 && v <= 1.0));
    }
  }

  TEST_CASE("loss closed forms") {
    ClassScores uniform{Tensor(1, 3, 3, 2, 0.7)};
    const std::vector<SegmentationMask> t{SegmentationMask(3, 3, 2, 1)};
    CHECK(weighted_ce_loss(uniform, t, {0.5, 0.5}) == doctest::Approx(0.5 * std::log(2.0)).epsilon(1e-14));

    ClassScores sharp{Tensor(1, 3, 3, 2, 0.0)};
    for (std::size_t p = 0; p < 9; ++p) sharp.logits.values()[p * 2 + 1] = 200.0;
    CHECK(weighted_ce_loss(sharp, t, {1.0, 1.0}) < 1e-12);

    const std::vector<SegmentationMask> ignored{SegmentationMask(3, 3, 2, 2, 2)};
    test::check_kind(ErrorKind::Undefined, [&] { weighted_ce_loss(uniform, ignored, {1.0, 1.0}); });
    test::check_kind(ErrorKind::Shape, [&] { weighted_ce_loss(uniform, t, {1.0}); });
  }

  TEST_CASE("property: loss matches a per-pixel oracle and its gradient matches finite differences") {
    Rng rng(5);
    std::normal_distribution<double> nd(0.0, 2.0);
    std::uniform_int_distribution<int> cls(0, 3);
    std::uniform_real_distribution<double> uw(0.0, 1.0);
    for (int trial = 0; trial < 30; ++trial) {
      ClassScores s{Tensor(2, 4, 4, 3)};
      for (double& v : s.logits.values()) v = nd(rng);
      std::vector<SegmentationMask> t(2, SegmentationMask(4, 4, 3));
      for (auto& m : t)
        for (auto& v : m.classes) v = cls(rng);
      t[0].classes[0] = 0;  // at least one counted pixel
      const std::vector<double> w{uw(rng), uw(rng), uw(rng)};
      Tensor grad;
      const double loss = weighted_ce_loss(s, t, w, &grad);
      CHECK(loss >= 0.0);
      CHECK(std::abs(loss - loss_oracle(s.logits, t, w)) < 1e-6);
      for (std::size_t i = 0; i < s.logits.size(); i += 5) {
        ClassScores up = s, down = s;
        up.logits.values()[i] += 1e-6;
        down.logits.values()[i] -= 1e-6;
        const double fd = (weighted_ce_loss(up, t, w) - weighted_ce_loss(down, t, w)) / 2e-6;
        CHECK(std::abs(fd - grad.values()[i]) < 1e-6);
      }
    }
  }

  TEST_CASE("train config validation") {
    TrainConfig c;
    c.validate();
    c.learning_rate = 0.0;
    c.validate();
    c.learning_rate = -1e-4;
    test::check_kind(ErrorKind::Parameter, [&] { c.validate(); });
    c = TrainConfig{};
    c.steps = 0;
    test::check_kind(ErrorKind::Parameter, [&] { c.validate(); });
    c = TrainConfig{};
    c.batch_size = 0;
    test::check_kind(ErrorKind::Parameter, [&] { c.validate(); });
  }

  TEST_CASE("small head learns separable features and logs are deterministic") {
    Rng rng(7);
    const FeatureSet fs = toy_feature_set(4, 8, 6, 3, rng);
    const auto weights = compute_class_weights(fs.masks, 3);
    TrainConfig cfg;
    cfg.learning_rate = 1e-2;
    cfg.steps = 60;
    cfg.batch_size = 2;
    cfg.seed = 4;
    SegmentationHead a(toy_head(8, 6, 3)), b(toy_head(8, 6, 3));
    const auto ra = train_head(a, fs, &fs, weights, cfg);
    const auto rb = train_head(b, fs, &fs, weights, cfg);
    CHECK(ra.log.to_jsonl() == rb.log.to_jsonl());
    CHECK(a.weight_hash() == b.weight_hash());
    CHECK(ra.step_losses.size() == 60);
    CHECK(ra.epochs == 30);
    CHECK(ra.step_losses.back() < ra.step_losses.front());
    REQUIRE(ra.final_validation.has_value());
    CHECK(ra.final_validation->accuracy > 0.9);
    CHECK(ra.best_epoch >= 1);
    CHECK(ra.log.records.back()["type"] == "summary");

    int epochs = 0;
    TrainHooks hooks;
    hooks.on_epoch_end = [&](int, const SegmentationHead&) { ++epochs; };
    SegmentationHead c(toy_head(8, 6, 3));
    cfg.steps = 5;
    const auto rc = train_head(c, fs, nullptr, weights, cfg, {}, hooks);
    CHECK(epochs == 3);  // 2 + 2 + 1 batches
    CHECK_FALSE(rc.final_validation.has_value());
    CHECK(rc.best_epoch == 0);
  }

  TEST_CASE("lr 0 leaves every parameter unchanged") {
    Rng rng(8);
    const FeatureSet fs = toy_feature_set(3, 8, 6, 3, rng);
    SegmentationHead head(toy_head(8, 6, 3));
    std::vector<std::vector<double>> before;
    for (auto* p : head.params()) before.push_back(p->value);
    TrainConfig cfg;
    cfg.learning_rate = 0.0;
    cfg.steps = 7;
    train_head(head, fs, nullptr, uniform_class_weights(3), cfg);
    const auto after = head.params();
    for (std::size_t i = 0; i < after.size(); ++i) CHECK(after[i]->value == before[i]);
  }

  TEST_CASE("non-finite loss aborts") {
    Rng rng(9);
    FeatureSet fs = toy_feature_set(2, 8, 6, 3, rng);
    fs.features[0].values()[0] = std::numeric_limits<double>::quiet_NaN();
    SegmentationHead head(toy_head(8, 6, 3));
    TrainConfig cfg;
    cfg.steps = 3;
    test::check_kind(ErrorKind::Runtime, [&] { train_head(head, fs, nullptr, uniform_class_weights(3), cfg); });
  }

  TEST_CASE("dataset-level training keeps the backbone frozen and unchanged") {
    SyntheticOptions so;
    so.n = 2;
    so.image_size = 64;
    so.num_classes = 3;
    const Dataset ds = generate_synthetic_dataset(so);
    Backbone::Options bo;
    bo.patch_size = 64;
    Backbone bb = Backbone::create_toy(bo);
    HeadConfig hc = toy_head(16, 80, 3);
    hc.output_size = 64;
    SegmentationHead head(hc);
    TrainConfig cfg;
    cfg.steps = 3;
    PipelineOptions po;
    po.grid = GridConfig{1, 64};
    po.feature_size = 16;
    test::check_kind(ErrorKind::Validation, [&] { train_head(ds, bb, head, cfg, po); });
    bb.freeze();
    const auto hash = bb.weight_hash();
    const auto r = train_head(ds, bb, head, cfg, po);
    CHECK(bb.weight_hash() == hash);
    CHECK(r.step_losses.size() == 3);
  }

  TEST_CASE("training log serializes one JSON object per line") {
    TrainingLog log;
    log.records.push_back({{"type", "step"}, {"step", 1}, {"loss", 0.5}});
    log.records.push_back({{"type", "summary"}});
    const std::string s = log.to_jsonl();
    CHECK(std::count(s.begin(), s.end(), '\n') == 2);
    CHECK(nlohmann::json::parse(s.substr(0, s.find('\n')))["loss"] == 0.5);
  }
}
