#include "pathseg/head.hpp"

#include <cmath>
#include <sstream>

#include "pathseg/checkpoint.hpp"
#include "pathseg/random.hpp"

namespace pathseg {

StridePlan derive_stride_plan(std::size_t input_size, std::size_t output_size) {
  require(input_size > 0 && output_size >= input_size && output_size % input_size == 0, ErrorKind::Shape,
          "head output size " + std::to_string(output_size) + " is not a multiple of input size " +
              std::to_string(input_size));
  const std::size_t factor = output_size / input_size;
  require((factor & (factor - 1)) == 0, ErrorKind::Shape,
          "head upsampling factor " + std::to_string(factor) + " is not a power of two");
  StridePlan p;
  p.first = factor >= 2 ? 2 : 1;
  p.second = factor >= 4 ? 2 : 1;
  p.residual = factor / (p.first * p.second);
  return p;
}

namespace {

std::size_t tconv_kernel(std::size_t stride) { return stride == 2 ? 2 : 3; }
std::size_t tconv_padding(std::size_t stride) { return stride == 2 ? 0 : 1; }

}  // namespace

SegmentationHead::SegmentationHead(const HeadConfig& config) : config_(config) {
  require(config.widths.size() == 3, ErrorKind::Parameter, "head needs exactly three widths");
  require(config.num_classes >= 2, ErrorKind::Parameter, "head needs at least two classes");
  require(config.in_channels > 0, ErrorKind::Parameter, "head input channels must be positive");
  require(config.first_kernel % 2 == 1, ErrorKind::Parameter, "first kernel size must be odd");
  plan_ = derive_stride_plan(config.input_size, config.output_size);
  Rng rng(derive_seed({config.seed, 0x4ead}));
  const auto& w = config.widths;
  conv1_ = nn::Conv2d("conv1", config.in_channels, w[0], config.first_kernel, 1, config.first_kernel / 2, rng);
  bn1_ = nn::BatchNorm2d("bn1", w[0], config.bn_momentum);
  up1_ = nn::ConvTranspose2d("up1", w[0], w[1], tconv_kernel(plan_.first), plan_.first, tconv_padding(plan_.first), rng);
  bn2_ = nn::BatchNorm2d("bn2", w[1], config.bn_momentum);
  up2_ = nn::ConvTranspose2d("up2", w[1], w[2], tconv_kernel(plan_.second), plan_.second,
                             tconv_padding(plan_.second), rng);
  bn3_ = nn::BatchNorm2d("bn3", w[2], config.bn_momentum);
  classifier_ = nn::Conv2d("classifier", w[2], config.num_classes, 1, 1, 0, rng);
  classifier_.bias().value.assign(config.num_classes, 0.0);
}

void SegmentationHead::check_input(const Tensor& f) const {
  require(f.c() == config_.in_channels, ErrorKind::Shape,
          "head expects " + std::to_string(config_.in_channels) + " channels, got " + f.shape_string());
  require(f.h() == config_.input_size && f.w() == config_.input_size, ErrorKind::Shape,
          "head expects " + std::to_string(config_.input_size) + "x" + std::to_string(config_.input_size) +
              " features, got " + f.shape_string());
}

ClassScores SegmentationHead::forward(const Tensor& features) const {
  check_input(features);
  Tensor h = nn::relu(bn1_.forward_eval(conv1_.forward(features)));
  h = nn::relu(bn2_.forward_eval(up1_.forward(h)));
  h = nn::relu(bn3_.forward_eval(up2_.forward(h)));
  Tensor low = classifier_.forward(h);
  return {nn::bilinear_resize(low, config_.output_size, config_.output_size)};
}

ClassScores SegmentationHead::forward_train(const Tensor& features, Trace& t, bool update_running_stats) {
  check_input(features);
  auto bn = [&](nn::BatchNorm2d& layer, const Tensor& x, nn::BatchNorm2d::Cache& cache) {
    return update_running_stats ? layer.forward_train(x, cache) : layer.forward_train_stateless(x, cache);
  };
  t.input = features;
  t.a1 = conv1_.forward(features);
  t.n1 = bn(bn1_, t.a1, t.c1);
  t.r1 = nn::relu(t.n1);
  t.a2 = up1_.forward(t.r1);
  t.n2 = bn(bn2_, t.a2, t.c2);
  t.r2 = nn::relu(t.n2);
  t.a3 = up2_.forward(t.r2);
  t.n3 = bn(bn3_, t.a3, t.c3);
  t.r3 = nn::relu(t.n3);
  t.low_logits = classifier_.forward(t.r3);
  return {nn::bilinear_resize(t.low_logits, config_.output_size, config_.output_size)};
}

void SegmentationHead::backward(const Trace& t, const Tensor& dlogits) {
  Tensor g = nn::bilinear_resize_backward(dlogits, t.low_logits.h(), t.low_logits.w());
  g = classifier_.backward(t.r3, g);
  g = bn3_.backward(t.c3, nn::relu_backward(t.n3, g));
  g = up2_.backward(t.r2, g);
  g = bn2_.backward(t.c2, nn::relu_backward(t.n2, g));
  g = up1_.backward(t.r1, g);
  g = bn1_.backward(t.c1, nn::relu_backward(t.n1, g));
  conv1_.backward(t.input, g, /*input_grad=*/false);
}

std::vector<nn::Param*> SegmentationHead::params() {
  return {&conv1_.weight(), &conv1_.bias(), &bn1_.gamma(), &bn1_.beta(),
          &up1_.weight(),   &up1_.bias(),   &bn2_.gamma(), &bn2_.beta(),
          &up2_.weight(),   &up2_.bias(),   &bn3_.gamma(), &bn3_.beta(),
          &classifier_.weight(), &classifier_.bias()};
}

void SegmentationHead::zero_grad() {
  for (auto* p : params()) p->zero_grad();
}

void SegmentationHead::zero_final_layer() {
  std::fill(classifier_.weight().value.begin(), classifier_.weight().value.end(), 0.0);
  std::fill(classifier_.bias().value.begin(), classifier_.bias().value.end(), 0.0);
}

std::size_t SegmentationHead::parameter_count() const {
  std::size_t n = 0;
  for (auto* p : const_cast<SegmentationHead*>(this)->params()) n += p->size();
  return n;
}

std::uint64_t SegmentationHead::weight_hash() const {
  Fnv1a h;
  for (auto* p : const_cast<SegmentationHead*>(this)->params()) h.update(std::span<const double>(p->value));
  for (const auto* bn : {&bn1_, &bn2_, &bn3_}) {
    h.update(std::span<const double>(bn->running_mean()));
    h.update(std::span<const double>(bn->running_var()));
  }
  return h.digest();
}

void SegmentationHead::save(const std::filesystem::path& path) const {
  Checkpoint ck;
  ck.set("kind", std::string("head"));
  ck.set("in_channels", static_cast<long long>(config_.in_channels));
  ck.set("num_classes", static_cast<long long>(config_.num_classes));
  std::string widths;
  for (std::size_t i = 0; i < config_.widths.size(); ++i) widths += (i ? "," : "") + std::to_string(config_.widths[i]);
  ck.set("widths", widths);
  ck.set("first_kernel", static_cast<long long>(config_.first_kernel));
  ck.set("input_size", static_cast<long long>(config_.input_size));
  ck.set("output_size", static_cast<long long>(config_.output_size));
  ck.set("bn_momentum", config_.bn_momentum);
  ck.set("parameter_count", static_cast<long long>(parameter_count()));
  for (auto* p : const_cast<SegmentationHead*>(this)->params()) ck.add_array(p->name, p->shape, p->value);
  const std::pair<const char*, const nn::BatchNorm2d*> bns[] = {{"bn1", &bn1_}, {"bn2", &bn2_}, {"bn3", &bn3_}};
  for (const auto& [name, bn] : bns) {
    ck.add_array(std::string(name) + ".running_mean", {bn->running_mean().size()}, bn->running_mean());
    ck.add_array(std::string(name) + ".running_var", {bn->running_var().size()}, bn->running_var());
  }
  ck.save(path);
}

SegmentationHead SegmentationHead::load(const std::filesystem::path& path) {
  const Checkpoint ck = Checkpoint::load(path);
  if (ck.get("kind").value_or("") != "head") fail(ErrorKind::Load, path.string() + " is not a head checkpoint");
  auto num = [&](const char* key) -> std::size_t {
    try {
      return std::stoull(ck.require_key(key));
    } catch (const Error&) {
      throw;
    } catch (const std::exception&) {
      fail(ErrorKind::Validation, std::string("head checkpoint field '") + key + "' is not an integer");
    }
  };
  HeadConfig cfg;
  cfg.in_channels = num("in_channels");
  cfg.num_classes = num("num_classes");
  cfg.first_kernel = num("first_kernel");
  cfg.input_size = num("input_size");
  cfg.output_size = num("output_size");
  cfg.bn_momentum = std::stod(ck.get("bn_momentum").value_or("0.1"));
  cfg.widths.clear();
  std::stringstream ws(ck.require_key("widths"));
  std::string item;
  while (std::getline(ws, item, ',')) cfg.widths.push_back(std::stoull(item));
  SegmentationHead head(cfg);
  for (auto* p : head.params()) p->value = ck.require_array(p->name, p->size()).data;
  std::pair<const char*, nn::BatchNorm2d*> bns[] = {{"bn1", &head.bn1_}, {"bn2", &head.bn2_}, {"bn3", &head.bn3_}};
  for (auto& [name, bn] : bns) {
    bn->running_mean() = ck.require_array(std::string(name) + ".running_mean", bn->running_mean().size()).data;
    bn->running_var() = ck.require_array(std::string(name) + ".running_var", bn->running_var().size()).data;
  }
  return head;
}

Tensor softmax(const Tensor& logits) {
  Tensor out = logits;
  const std::size_t K = logits.c();
  const std::size_t pixels = logits.size() / std::max<std::size_t>(K, 1);
  double* d = out.values().data();
  for (std::size_t p = 0; p < pixels; ++p) {
    double* row = d + p * K;
    double mx = row[0];
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, row[k]);
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) z += (row[k] = std::exp(row[k] - mx));
    for (std::size_t k = 0; k < K; ++k) row[k] /= z;
  }
  return out;
}

SegmentationMask predict_mask(const ClassScores& scores, std::size_t item) {
  const Tensor& l = scores.logits;
  require(item < l.n(), ErrorKind::Shape, "batch item out of range");
  const auto K = static_cast<int>(l.c());
  SegmentationMask m(l.h(), l.w(), K);
  for (std::size_t y = 0; y < l.h(); ++y)
    for (std::size_t x = 0; x < l.w(); ++x) {
      const double* row = l.pixel(item, y, x);
      int best = 0;
      for (int k = 1; k < K; ++k)
        if (row[k] > row[best]) best = k;
      m.at(y, x) = best;
    }
  return m;
}

}  // namespace pathseg
