#include <cmath>
#include <functional>

#include "doctest.h"
#include "pathseg/head.hpp"
#include "pathseg/nn.hpp"
#include "pathseg/training.hpp"

using namespace pathseg;
using namespace pathseg::nn;

namespace {

Tensor random_tensor(std::size_t n, std::size_t h, std::size_t w, std::size_t c, Rng& rng) {
  Tensor t(n, h, w, c);
  std::normal_distribution<double> nd;
  for (double& v : t.values()) v = nd(rng);
  return t;
}

// Direct-loop reference convolution, zero padding.
Tensor conv_reference(const Conv2d& conv, const Tensor& x, std::size_t padding) {
  const std::size_t k = conv.kernel(), s = conv.stride(), cin = conv.in_channels(), cout = conv.out_channels();
  const std::size_t oh = conv.out_size(x.h()), ow = conv.out_size(x.w());
  Tensor y(x.n(), oh, ow, cout);
  for (std::size_t b = 0; b < x.n(); ++b)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox)
        for (std::size_t co = 0; co < cout; ++co) {
          double acc = conv.bias().value[co];
          for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
              const long iy = static_cast<long>(oy * s + ky) - static_cast<long>(padding);
              const long ix = static_cast<long>(ox * s + kx) - static_cast<long>(padding);
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(x.h()) || ix >= static_cast<long>(x.w())) continue;
              for (std::size_t ci = 0; ci < cin; ++ci)
                acc += x.at(b, iy, ix, ci) * conv.weight().value[((ky * k + kx) * cin + ci) * cout + co];
            }
          y.at(b, oy, ox, co) = acc;
        }
  return y;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
  return m;
}

}  // namespace

TEST_SUITE("nn") {
  TEST_CASE("conv2d matches a direct loop") {
    Rng rng(3);
    for (auto [k, s, p] : {std::tuple{3u, 1u, 1u}, {3u, 2u, 1u}, {1u, 1u, 0u}, {4u, 2u, 1u}}) {
      Conv2d conv("c", 3, 5, k, s, p, rng);
      for (double& b : conv.bias().value) b = 0.1;
      const Tensor x = random_tensor(2, 9, 8, 3, rng);
      const Tensor y = conv.forward(x);
      const Tensor ref = conv_reference(conv, x, p);
      REQUIRE(y.same_shape(ref));
      CHECK(max_abs_diff(y, ref) < 1e-12);
    }
  }

  TEST_CASE("conv transpose is the adjoint of a strided conv") {
    // <conv(x), y> == <x, tconv(y)> when both share weights and have no bias.
    Rng rng(5);
    ConvTranspose2d tc("t", 4, 3, 2, 2, 0, rng);
    for (double& b : tc.bias().value) b = 0.0;
    const Tensor x = random_tensor(1, 5, 5, 4, rng);
    const Tensor y = random_tensor(1, 10, 10, 3, rng);
    const Tensor tx = tc.forward(x);
    REQUIRE(tx.h() == 10);
    // Adjoint by hand: for stride == kernel every output pixel has one source.
    Tensor adj(1, 5, 5, 4);
    for (std::size_t iy = 0; iy < 5; ++iy)
      for (std::size_t ix = 0; ix < 5; ++ix)
        for (std::size_t ky = 0; ky < 2; ++ky)
          for (std::size_t kx = 0; kx < 2; ++kx)
            for (std::size_t ci = 0; ci < 4; ++ci)
              for (std::size_t co = 0; co < 3; ++co)
                adj(iy, ix, ci) += y(2 * iy + ky, 2 * ix + kx, co) * tc.weight().value[((ky * 2 + kx) * 4 + ci) * 3 + co];
    double lhs = 0, rhs = 0;
    for (std::size_t i = 0; i < tx.size(); ++i) lhs += tx.values()[i] * y.values()[i];
    for (std::size_t i = 0; i < x.size(); ++i) rhs += x.values()[i] * adj.values()[i];
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
  }

  TEST_CASE("bilinear resize backward is the adjoint of forward") {
    Rng rng(9);
    const Tensor x = random_tensor(1, 4, 5, 2, rng);
    const Tensor y = random_tensor(1, 13, 9, 2, rng);
    const Tensor fx = bilinear_resize(x, 13, 9);
    const Tensor by = bilinear_resize_backward(y, 4, 5);
    double lhs = 0, rhs = 0;
    for (std::size_t i = 0; i < fx.size(); ++i) lhs += fx.values()[i] * y.values()[i];
    for (std::size_t i = 0; i < x.size(); ++i) rhs += x.values()[i] * by.values()[i];
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
  }

  TEST_CASE("batch norm training output is normalized and running stats move by momentum") {
    Rng rng(1);
    BatchNorm2d bn("bn", 3);
    Tensor x = random_tensor(2, 4, 4, 3, rng);
    for (double& v : x.values()) v = 2.0 * v + 5.0;
    BatchNorm2d::Cache cache;
    const Tensor y = bn.forward_train(x, cache);
    for (std::size_t c = 0; c < 3; ++c) {
      double mean = 0, sq = 0, xmean = 0;
      const std::size_t m = 32;
      for (std::size_t i = 0; i < y.size() / 3; ++i) {
        mean += y.values()[i * 3 + c];
        sq += y.values()[i * 3 + c] * y.values()[i * 3 + c];
        xmean += x.values()[i * 3 + c];
      }
      mean /= m;
      xmean /= m;
      CHECK(std::abs(mean) < 1e-12);
      CHECK(sq / m == doctest::Approx(1.0).epsilon(1e-3));
      CHECK(bn.running_mean()[c] == doctest::Approx(0.1 * xmean).epsilon(1e-12));
    }
  }

  TEST_CASE("Adam first step moves every parameter by lr against the gradient sign") {
    Param p("p", {3});
    p.value = {1.0, -2.0, 0.5};
    p.grad = {0.3, -4.0, 1e-3};
    Adam opt(0.01);
    opt.step({&p});
    CHECK(p.value[0] == doctest::Approx(0.99).epsilon(1e-6));
    CHECK(p.value[1] == doctest::Approx(-1.99).epsilon(1e-6));
    CHECK(p.value[2] == doctest::Approx(0.49).epsilon(1e-4));
    CHECK(opt.steps_taken() == 1);
  }

  TEST_CASE("head gradients agree with central finite differences") {
    HeadConfig cfg;
    cfg.in_channels = 3;
    cfg.num_classes = 3;
    cfg.widths = {4, 4, 3};
    cfg.first_kernel = 3;
    cfg.input_size = 4;
    cfg.output_size = 32;
    cfg.seed = 17;
    SegmentationHead head(cfg);
    Rng rng(21);
    const Tensor x = random_tensor(2, 4, 4, 3, rng);
    std::vector<SegmentationMask> masks(2, SegmentationMask(32, 32, 3));
    std::uniform_int_distribution<int> cls(0, 3);
    for (auto& m : masks)
      for (auto& v : m.classes) v = cls(rng);  // 3 is the ignore value
    const std::vector<double> w{0.5, 1.0, 0.8};

    auto loss_at = [&] {
      SegmentationHead::Trace tr;
      return weighted_ce_loss(head.forward_train(x, tr, false), masks, w);
    };
    head.zero_grad();
    SegmentationHead::Trace tr;
    Tensor dl;
    weighted_ce_loss(head.forward_train(x, tr, false), masks, w, &dl);
    head.backward(tr, dl);

    // 20 parameters spread over every layer.
    std::vector<std::pair<Param*, std::size_t>> probes;
    const auto params = head.params();
    for (std::size_t i = 0; probes.size() < 20; ++i) {
      Param* p = params[i % params.size()];
      probes.emplace_back(p, (i * 7919) % p->size());
    }
    double worst = 0;
    for (auto [p, idx] : probes) {
      const double saved = p->value[idx], h = 1e-5;
      p->value[idx] = saved + h;
      const double up = loss_at();
      p->value[idx] = saved - h;
      const double down = loss_at();
      p->value[idx] = saved;
      const double numeric = (up - down) / (2 * h);
      const double analytic = p->grad[idx];
      const double rel = std::abs(numeric - analytic) / std::max(1e-6, std::abs(numeric) + std::abs(analytic));
      worst = std::max(worst, rel);
      CHECK_MESSAGE(rel < 1e-3, p->name << "[" << idx << "] analytic " << analytic << " numeric " << numeric);
    }
    MESSAGE("worst relative gradient error " << worst);
  }
}
