#include "pathseg/nn.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace pathseg::nn {

Param::Param(std::string n, std::vector<std::size_t> s) : name(std::move(n)), shape(std::move(s)) {
  const std::size_t count =
      std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  value.assign(count, 0.0);
  grad.assign(count, 0.0);
}

void Param::zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

void init_uniform(Param& p, std::size_t fan_in, Rng& rng, double gain) {
  const double bound = gain / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (double& v : p.value) v = dist(rng);
}

// ---------------------------------------------------------------------------
// Conv2d

Conv2d::Conv2d(std::string name, std::size_t cin, std::size_t cout, std::size_t kernel,
               std::size_t stride, std::size_t padding, Rng& rng)
    : cin_(cin),
      cout_(cout),
      kernel_(kernel),
      stride_(stride),
      padding_(padding),
      weight_(name + ".weight", {kernel, kernel, cin, cout}),
      bias_(name + ".bias", {cout}) {
  require(cin > 0 && cout > 0 && kernel > 0 && stride > 0, ErrorKind::Parameter,
          "conv2d: zero-sized layer " + name);
  init_uniform(weight_, kernel * kernel * cin, rng);
  init_uniform(bias_, kernel * kernel * cin, rng);
}

namespace {

// C (m x n) = alpha * op(A) * op(B) + beta * C, row-major.
void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
          const double* b, std::size_t ldb, double beta, double* c, std::size_t ldc) {
  if (m == 0 || n == 0) return;
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, static_cast<int>(m),
              static_cast<int>(n), static_cast<int>(k), 1.0, a, static_cast<int>(lda), b, static_cast<int>(ldb), beta,
              c, static_cast<int>(ldc));
}

}  // namespace

bool Conv2d::pointwise() const { return kernel_ == 1 && stride_ == 1 && padding_ == 0; }

std::vector<double> Conv2d::im2col(const Tensor& x) const {
  const std::size_t oh = out_size(x.h()), ow = out_size(x.w());
  const std::size_t row = kernel_ * kernel_ * cin_;
  std::vector<double> col(x.n() * oh * ow * row, 0.0);
  const auto ih = static_cast<std::ptrdiff_t>(x.h()), iw = static_cast<std::ptrdiff_t>(x.w());
  double* dst = col.data();
  for (std::size_t b = 0; b < x.n(); ++b)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox, dst += row)
        for (std::size_t ky = 0; ky < kernel_; ++ky) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * stride_ + ky) - static_cast<std::ptrdiff_t>(padding_);
          if (iy < 0 || iy >= ih) continue;
          for (std::size_t kx = 0; kx < kernel_; ++kx) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * stride_ + kx) - static_cast<std::ptrdiff_t>(padding_);
            if (ix < 0 || ix >= iw) continue;
            const double* xi = x.pixel(b, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
            std::copy(xi, xi + cin_, dst + (ky * kernel_ + kx) * cin_);
          }
        }
  return col;
}

Tensor Conv2d::forward(const Tensor& x) const {
  require(x.c() == cin_, ErrorKind::Shape,
          weight_.name + ": expected " + std::to_string(cin_) + " input channels, got " + x.shape_string());
  require(x.h() + 2 * padding_ >= kernel_ && x.w() + 2 * padding_ >= kernel_, ErrorKind::Shape,
          weight_.name + ": input smaller than kernel");
  const std::size_t oh = out_size(x.h()), ow = out_size(x.w());
  Tensor out(x.n(), oh, ow, cout_);
  const std::size_t P = x.n() * oh * ow, row = kernel_ * kernel_ * cin_;
  double* o = out.values().data();
  for (std::size_t p = 0; p < P; ++p) std::copy(bias_.value.begin(), bias_.value.end(), o + p * cout_);
  if (pointwise()) {
    gemm(false, false, P, cout_, cin_, x.values().data(), cin_, weight_.value.data(), cout_, 1.0, o, cout_);
  } else {
    const auto col = im2col(x);
    gemm(false, false, P, cout_, row, col.data(), row, weight_.value.data(), cout_, 1.0, o, cout_);
  }
  return out;
}

Tensor Conv2d::backward(const Tensor& x, const Tensor& dy, bool input_grad) {
  const std::size_t oh = out_size(x.h()), ow = out_size(x.w());
  require(dy.n() == x.n() && dy.h() == oh && dy.w() == ow && dy.c() == cout_, ErrorKind::Shape,
          weight_.name + ": gradient shape mismatch");
  const std::size_t P = x.n() * oh * ow, row = kernel_ * kernel_ * cin_;
  const double* g = dy.values().data();
  double* dB = bias_.grad.data();
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t co = 0; co < cout_; ++co) dB[co] += g[p * cout_ + co];

  if (pointwise()) {
    gemm(true, false, cin_, cout_, P, x.values().data(), cin_, g, cout_, 1.0, weight_.grad.data(), cout_);
    if (!input_grad) return Tensor();
    Tensor dx(x.n(), x.h(), x.w(), x.c());
    gemm(false, true, P, cin_, cout_, g, cout_, weight_.value.data(), cout_, 0.0, dx.values().data(), cin_);
    return dx;
  }

  const auto col = im2col(x);
  gemm(true, false, row, cout_, P, col.data(), row, g, cout_, 1.0, weight_.grad.data(), cout_);
  if (!input_grad) return Tensor();
  std::vector<double> dcol(P * row);
  gemm(false, true, P, row, cout_, g, cout_, weight_.value.data(), cout_, 0.0, dcol.data(), row);
  Tensor dx(x.n(), x.h(), x.w(), x.c());
  const auto ih = static_cast<std::ptrdiff_t>(x.h()), iw = static_cast<std::ptrdiff_t>(x.w());
  const double* src = dcol.data();
  for (std::size_t b = 0; b < x.n(); ++b)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox, src += row)
        for (std::size_t ky = 0; ky < kernel_; ++ky) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * stride_ + ky) - static_cast<std::ptrdiff_t>(padding_);
          if (iy < 0 || iy >= ih) continue;
          for (std::size_t kx = 0; kx < kernel_; ++kx) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * stride_ + kx) - static_cast<std::ptrdiff_t>(padding_);
            if (ix < 0 || ix >= iw) continue;
            double* d = dx.pixel(b, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
            const double* s = src + (ky * kernel_ + kx) * cin_;
            for (std::size_t ci = 0; ci < cin_; ++ci) d[ci] += s[ci];
          }
        }
  return dx;
}

// ---------------------------------------------------------------------------
// ConvTranspose2d

ConvTranspose2d::ConvTranspose2d(std::string name, std::size_t cin, std::size_t cout,
                                 std::size_t kernel, std::size_t stride, std::size_t padding, Rng& rng)
    : cin_(cin),
      cout_(cout),
      kernel_(kernel),
      stride_(stride),
      padding_(padding),
      weight_(name + ".weight", {kernel, kernel, cin, cout}),
      bias_(name + ".bias", {cout}) {
  require(cin > 0 && cout > 0 && kernel > 0 && stride > 0 && 2 * padding < kernel + stride,
          ErrorKind::Parameter, "conv_transpose2d: invalid geometry for " + name);
  // PyTorch uses the output-side fan for transposed convs: cout * k * k / stride^2 per input.
  const std::size_t fan_in = std::max<std::size_t>(cin * kernel * kernel / (stride * stride), 1);
  init_uniform(weight_, fan_in, rng);
  init_uniform(bias_, fan_in, rng);
}

// Each kernel tap (ky, kx) is one GEMM X * W_k; the product rows are then
// scattered to (iy * s + ky - p, ix * s + kx - p).
Tensor ConvTranspose2d::forward(const Tensor& x) const {
  require(x.c() == cin_, ErrorKind::Shape,
          weight_.name + ": expected " + std::to_string(cin_) + " input channels, got " + x.shape_string());
  const std::size_t oh = out_size(x.h()), ow = out_size(x.w());
  Tensor out(x.n(), oh, ow, cout_);
  const std::size_t P = x.n() * x.h() * x.w();
  double* o = out.values().data();
  for (std::size_t p = 0; p < out.size() / cout_; ++p) std::copy(bias_.value.begin(), bias_.value.end(), o + p * cout_);
  // One GEMM against the weights laid out as (cin, k*k*cout), then scatter.
  const std::size_t kk = kernel_ * kernel_, wide = kk * cout_;
  std::vector<double> wt(cin_ * wide);
  for (std::size_t k = 0; k < kk; ++k)
    for (std::size_t ci = 0; ci < cin_; ++ci)
      std::copy_n(weight_.value.data() + (k * cin_ + ci) * cout_, cout_, wt.data() + ci * wide + k * cout_);
  std::vector<double> t(P * wide);
  gemm(false, false, P, wide, cin_, x.values().data(), cin_, wt.data(), wide, 0.0, t.data(), wide);
  const auto ohs = static_cast<std::ptrdiff_t>(oh), ows = static_cast<std::ptrdiff_t>(ow);
  const double* row = t.data();
  for (std::size_t b = 0; b < x.n(); ++b)
    for (std::size_t iy = 0; iy < x.h(); ++iy)
      for (std::size_t ix = 0; ix < x.w(); ++ix, row += wide)
        for (std::size_t ky = 0; ky < kernel_; ++ky) {
          const auto oy = static_cast<std::ptrdiff_t>(iy * stride_ + ky) - static_cast<std::ptrdiff_t>(padding_);
          if (oy < 0 || oy >= ohs) continue;
          for (std::size_t kx = 0; kx < kernel_; ++kx) {
            const auto ox = static_cast<std::ptrdiff_t>(ix * stride_ + kx) - static_cast<std::ptrdiff_t>(padding_);
            if (ox < 0 || ox >= ows) continue;
            const double* src = row + (ky * kernel_ + kx) * cout_;
            double* d = out.pixel(b, static_cast<std::size_t>(oy), static_cast<std::size_t>(ox));
            for (std::size_t co = 0; co < cout_; ++co) d[co] += src[co];
          }
        }
  return out;
}

Tensor ConvTranspose2d::backward(const Tensor& x, const Tensor& dy) {
  const std::size_t oh = out_size(x.h()), ow = out_size(x.w());
  require(dy.n() == x.n() && dy.h() == oh && dy.w() == ow && dy.c() == cout_, ErrorKind::Shape,
          weight_.name + ": gradient shape mismatch");
  const std::size_t P = x.n() * x.h() * x.w();
  Tensor dx(x.n(), x.h(), x.w(), x.c());
  double* dB = bias_.grad.data();
  const double* gy = dy.values().data();
  for (std::size_t p = 0; p < dy.size() / cout_; ++p)
    for (std::size_t co = 0; co < cout_; ++co) dB[co] += gy[p * cout_ + co];
  const std::size_t kk = kernel_ * kernel_, wide = kk * cout_;
  std::vector<double> g(P * wide, 0.0);
  const auto ohs = static_cast<std::ptrdiff_t>(oh), ows = static_cast<std::ptrdiff_t>(ow);
  double* row = g.data();
  for (std::size_t b = 0; b < x.n(); ++b)
    for (std::size_t iy = 0; iy < x.h(); ++iy)
      for (std::size_t ix = 0; ix < x.w(); ++ix, row += wide)
        for (std::size_t ky = 0; ky < kernel_; ++ky) {
          const auto oy = static_cast<std::ptrdiff_t>(iy * stride_ + ky) - static_cast<std::ptrdiff_t>(padding_);
          if (oy < 0 || oy >= ohs) continue;
          for (std::size_t kx = 0; kx < kernel_; ++kx) {
            const auto ox = static_cast<std::ptrdiff_t>(ix * stride_ + kx) - static_cast<std::ptrdiff_t>(padding_);
            if (ox < 0 || ox >= ows) continue;
            const double* s = dy.pixel(b, static_cast<std::size_t>(oy), static_cast<std::size_t>(ox));
            std::copy(s, s + cout_, row + (ky * kernel_ + kx) * cout_);
          }
        }
  std::vector<double> wt(cin_ * wide), dwt(cin_ * wide, 0.0);
  for (std::size_t k = 0; k < kk; ++k)
    for (std::size_t ci = 0; ci < cin_; ++ci)
      std::copy_n(weight_.value.data() + (k * cin_ + ci) * cout_, cout_, wt.data() + ci * wide + k * cout_);
  gemm(true, false, cin_, wide, P, x.values().data(), cin_, g.data(), wide, 0.0, dwt.data(), wide);
  gemm(false, true, P, cin_, wide, g.data(), wide, wt.data(), wide, 0.0, dx.values().data(), cin_);
  for (std::size_t k = 0; k < kk; ++k)
    for (std::size_t ci = 0; ci < cin_; ++ci) {
      const double* src = dwt.data() + ci * wide + k * cout_;
      double* dst = weight_.grad.data() + (k * cin_ + ci) * cout_;
      for (std::size_t co = 0; co < cout_; ++co) dst[co] += src[co];
    }
  return dx;
}

// ---------------------------------------------------------------------------
// BatchNorm2d

BatchNorm2d::BatchNorm2d(std::string name, std::size_t channels, double momentum, double eps)
    : channels_(channels),
      momentum_(momentum),
      eps_(eps),
      gamma_(name + ".gamma", {channels}),
      beta_(name + ".beta", {channels}),
      running_mean_(channels, 0.0),
      running_var_(channels, 1.0) {
  std::fill(gamma_.value.begin(), gamma_.value.end(), 1.0);
}

Tensor BatchNorm2d::normalize(const Tensor& x, Cache& cache, std::vector<double>* batch_mean,
                              std::vector<double>* batch_var) const {
  require(x.c() == channels_, ErrorKind::Shape, gamma_.name + ": channel mismatch");
  const std::size_t C = channels_;
  const std::size_t pixels = x.n() * x.h() * x.w();
  require(pixels > 0, ErrorKind::Shape, gamma_.name + ": empty batch");
  std::vector<double> mean(C, 0.0), var(C, 0.0);
  const double* src = x.values().data();
  for (std::size_t p = 0; p < pixels; ++p)
    for (std::size_t c = 0; c < C; ++c) mean[c] += src[p * C + c];
  for (auto& m : mean) m /= static_cast<double>(pixels);
  for (std::size_t p = 0; p < pixels; ++p)
    for (std::size_t c = 0; c < C; ++c) {
      const double d = src[p * C + c] - mean[c];
      var[c] += d * d;
    }
  for (auto& v : var) v /= static_cast<double>(pixels);

  cache.inv_std.resize(C);
  for (std::size_t c = 0; c < C; ++c) cache.inv_std[c] = 1.0 / std::sqrt(var[c] + eps_);
  cache.x_hat = Tensor(x.n(), x.h(), x.w(), C);
  Tensor y(x.n(), x.h(), x.w(), C);
  double* xh = cache.x_hat.values().data();
  double* dst = y.values().data();
  for (std::size_t p = 0; p < pixels; ++p)
    for (std::size_t c = 0; c < C; ++c) {
      const double v = (src[p * C + c] - mean[c]) * cache.inv_std[c];
      xh[p * C + c] = v;
      dst[p * C + c] = gamma_.value[c] * v + beta_.value[c];
    }
  if (batch_mean) *batch_mean = std::move(mean);
  if (batch_var) *batch_var = std::move(var);
  return y;
}

Tensor BatchNorm2d::forward_train(const Tensor& x, Cache& cache) {
  std::vector<double> mean, var;
  Tensor y = normalize(x, cache, &mean, &var);
  const double m = static_cast<double>(x.n() * x.h() * x.w());
  const double unbias = m > 1.0 ? m / (m - 1.0) : 1.0;
  for (std::size_t c = 0; c < channels_; ++c) {
    running_mean_[c] = (1.0 - momentum_) * running_mean_[c] + momentum_ * mean[c];
    running_var_[c] = (1.0 - momentum_) * running_var_[c] + momentum_ * var[c] * unbias;
  }
  return y;
}

Tensor BatchNorm2d::forward_train_stateless(const Tensor& x, Cache& cache) const {
  return normalize(x, cache, nullptr, nullptr);
}

Tensor BatchNorm2d::forward_eval(const Tensor& x) const {
  require(x.c() == channels_, ErrorKind::Shape, gamma_.name + ": channel mismatch");
  const std::size_t C = channels_;
  std::vector<double> scale(C), shift(C);
  for (std::size_t c = 0; c < C; ++c) {
    scale[c] = gamma_.value[c] / std::sqrt(running_var_[c] + eps_);
    shift[c] = beta_.value[c] - running_mean_[c] * scale[c];
  }
  Tensor y(x.n(), x.h(), x.w(), C);
  const double* src = x.values().data();
  double* dst = y.values().data();
  const std::size_t pixels = x.n() * x.h() * x.w();
  for (std::size_t p = 0; p < pixels; ++p)
    for (std::size_t c = 0; c < C; ++c) dst[p * C + c] = src[p * C + c] * scale[c] + shift[c];
  return y;
}

Tensor BatchNorm2d::backward(const Cache& cache, const Tensor& dy) {
  const std::size_t C = channels_;
  require(dy.same_shape(cache.x_hat), ErrorKind::Shape, gamma_.name + ": gradient shape mismatch");
  const std::size_t pixels = dy.n() * dy.h() * dy.w();
  const double* g = dy.values().data();
  const double* xh = cache.x_hat.values().data();
  std::vector<double> sum_g(C, 0.0), sum_gx(C, 0.0);
  for (std::size_t p = 0; p < pixels; ++p)
    for (std::size_t c = 0; c < C; ++c) {
      sum_g[c] += g[p * C + c];
      sum_gx[c] += g[p * C + c] * xh[p * C + c];
    }
  for (std::size_t c = 0; c < C; ++c) {
    gamma_.grad[c] += sum_gx[c];
    beta_.grad[c] += sum_g[c];
  }
  const double m = static_cast<double>(pixels);
  Tensor dx(dy.n(), dy.h(), dy.w(), C);
  double* out = dx.values().data();
  for (std::size_t p = 0; p < pixels; ++p)
    for (std::size_t c = 0; c < C; ++c) {
      const double k = gamma_.value[c] * cache.inv_std[c] / m;
      out[p * C + c] = k * (m * g[p * C + c] - sum_g[c] - xh[p * C + c] * sum_gx[c]);
    }
  return dx;
}

// ---------------------------------------------------------------------------
// Stateless ops

Tensor group_norm(const Tensor& x, std::size_t groups, const Param& gamma, const Param& beta, double eps) {
  const std::size_t C = x.c();
  require(groups > 0 && C % groups == 0, ErrorKind::Shape, "group_norm: channels not divisible by groups");
  require(gamma.size() == C && beta.size() == C, ErrorKind::Shape, "group_norm: affine size mismatch");
  const std::size_t per = C / groups;
  const std::size_t hw = x.h() * x.w();
  Tensor y(x.n(), x.h(), x.w(), C);
  for (std::size_t b = 0; b < x.n(); ++b) {
    const double* src = x.pixel(b, 0, 0);
    double* dst = y.pixel(b, 0, 0);
    for (std::size_t g = 0; g < groups; ++g) {
      double mean = 0.0, sq = 0.0;
      for (std::size_t p = 0; p < hw; ++p)
        for (std::size_t c = g * per; c < (g + 1) * per; ++c) mean += src[p * C + c];
      const double count = static_cast<double>(hw * per);
      mean /= count;
      for (std::size_t p = 0; p < hw; ++p)
        for (std::size_t c = g * per; c < (g + 1) * per; ++c) {
          const double d = src[p * C + c] - mean;
          sq += d * d;
        }
      const double inv = 1.0 / std::sqrt(sq / count + eps);
      for (std::size_t p = 0; p < hw; ++p)
        for (std::size_t c = g * per; c < (g + 1) * per; ++c)
          dst[p * C + c] = (src[p * C + c] - mean) * inv * gamma.value[c] + beta.value[c];
    }
  }
  return y;
}

Tensor relu(const Tensor& x) {
  Tensor y = x;
  for (double& v : y.values()) v = std::max(v, 0.0);  // NaN propagates
  return y;
}

Tensor relu_backward(const Tensor& x, const Tensor& dy) {
  Tensor dx = dy;
  auto xs = x.values();
  auto d = dx.values();
  for (std::size_t i = 0; i < d.size(); ++i)
    if (!(xs[i] > 0.0)) d[i] = 0.0;
  return dx;
}

Tensor silu(const Tensor& x) {
  Tensor y = x;
  for (double& v : y.values()) v = v / (1.0 + std::exp(-v));
  return y;
}

Tensor silu_backward(const Tensor& x, const Tensor& dy) {
  Tensor dx = dy;
  auto xs = x.values();
  auto d = dx.values();
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double s = 1.0 / (1.0 + std::exp(-xs[i]));
    d[i] *= s * (1.0 + xs[i] * (1.0 - s));
  }
  return dx;
}

Tensor upsample_nearest(const Tensor& x, std::size_t factor) {
  require(factor >= 1, ErrorKind::Parameter, "upsample factor must be >= 1");
  Tensor y(x.n(), x.h() * factor, x.w() * factor, x.c());
  for (std::size_t b = 0; b < x.n(); ++b)
    for (std::size_t oy = 0; oy < y.h(); ++oy)
      for (std::size_t ox = 0; ox < y.w(); ++ox) {
        const double* s = x.pixel(b, oy / factor, ox / factor);
        std::copy(s, s + x.c(), y.pixel(b, oy, ox));
      }
  return y;
}

namespace {

struct Tap {
  std::size_t i0, i1;
  double f;
};

std::vector<Tap> corner_aligned_taps(std::size_t in, std::size_t out) {
  std::vector<Tap> taps(out);
  for (std::size_t o = 0; o < out; ++o) {
    if (out == 1 || in == 1) {
      taps[o] = {0, 0, 0.0};
      continue;
    }
    const double src = static_cast<double>(o * (in - 1)) / static_cast<double>(out - 1);
    auto i0 = static_cast<std::size_t>(std::floor(src));
    if (i0 >= in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace

Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  require(out_h >= x.h() && out_w >= x.w(), ErrorKind::Parameter,
          "bilinear upsampling target " + std::to_string(out_h) + "x" + std::to_string(out_w) +
              " smaller than source " + x.shape_string());
  if (out_h == x.h() && out_w == x.w()) return x;
  const auto ty = corner_aligned_taps(x.h(), out_h);
  const auto tx = corner_aligned_taps(x.w(), out_w);
  const std::size_t C = x.c();
  Tensor y(x.n(), out_h, out_w, C);
  for (std::size_t b = 0; b < x.n(); ++b)
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const Tap& vy = ty[oy];
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const Tap& vx = tx[ox];
        const double* p00 = x.pixel(b, vy.i0, vx.i0);
        const double* p01 = x.pixel(b, vy.i0, vx.i1);
        const double* p10 = x.pixel(b, vy.i1, vx.i0);
        const double* p11 = x.pixel(b, vy.i1, vx.i1);
        double* o = y.pixel(b, oy, ox);
        // Difference form keeps constant regions exactly constant.
        for (std::size_t c = 0; c < C; ++c) {
          const double top = p00[c] + vx.f * (p01[c] - p00[c]);
          const double bottom = p10[c] + vx.f * (p11[c] - p10[c]);
          o[c] = top + vy.f * (bottom - top);
        }
      }
    }
  return y;
}

Tensor bilinear_resize_backward(const Tensor& dy, std::size_t in_h, std::size_t in_w) {
  if (dy.h() == in_h && dy.w() == in_w) return dy;
  const auto ty = corner_aligned_taps(in_h, dy.h());
  const auto tx = corner_aligned_taps(in_w, dy.w());
  const std::size_t C = dy.c();
  Tensor dx(dy.n(), in_h, in_w, C);
  for (std::size_t b = 0; b < dy.n(); ++b)
    for (std::size_t oy = 0; oy < dy.h(); ++oy) {
      const Tap& vy = ty[oy];
      for (std::size_t ox = 0; ox < dy.w(); ++ox) {
        const Tap& vx = tx[ox];
        const double w00 = (1.0 - vy.f) * (1.0 - vx.f), w01 = (1.0 - vy.f) * vx.f;
        const double w10 = vy.f * (1.0 - vx.f), w11 = vy.f * vx.f;
        const double* g = dy.pixel(b, oy, ox);
        double* p00 = dx.pixel(b, vy.i0, vx.i0);
        double* p01 = dx.pixel(b, vy.i0, vx.i1);
        double* p10 = dx.pixel(b, vy.i1, vx.i0);
        double* p11 = dx.pixel(b, vy.i1, vx.i1);
        for (std::size_t c = 0; c < C; ++c) {
          p00[c] += w00 * g[c];
          p01[c] += w01 * g[c];
          p10[c] += w10 * g[c];
          p11[c] += w11 * g[c];
        }
      }
    }
  return dx;
}

// ---------------------------------------------------------------------------
// Adam

void Adam::step(const std::vector<Param*>& params) {
  if (m_.size() != params.size()) {
    m_.assign(params.size(), {});
    v_.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(params[i]->size(), 0.0);
      v_[i].assign(params[i]->size(), 0.0);
    }
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Param& p = *params[i];
    require(m_[i].size() == p.size(), ErrorKind::Shape, "adam: parameter set changed between steps");
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double g = p.grad[j];
      m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g;
      v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g * g;
      const double m_hat = m_[i][j] / bc1;
      const double v_hat = v_[i][j] / bc2;
      p.value[j] -= lr_ * m_hat / (std::sqrt(v_hat) + eps_);
    }
  }
}

}  // namespace pathseg::nn
