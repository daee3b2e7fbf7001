#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pathseg/random.hpp"
#include "pathseg/tensor.hpp"

namespace pathseg::nn {

/// A trainable array with its gradient accumulator.
struct Param {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<double> value;
  std::vector<double> grad;

  Param() = default;
  Param(std::string n, std::vector<std::size_t> s);
  std::size_t size() const { return value.size(); }
  void zero_grad();
};

/// Fan-in scaled uniform init: U(-bound, bound), bound = gain / sqrt(fan_in).
void init_uniform(Param& p, std::size_t fan_in, Rng& rng, double gain = 1.0);

/// 2-D convolution, weights laid out (k, k, cin, cout).
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::string name, std::size_t cin, std::size_t cout, std::size_t kernel,
         std::size_t stride, std::size_t padding, Rng& rng);

  Tensor forward(const Tensor& x) const;
  /// Accumulates weight/bias gradients, returns dL/dx (left empty when
  /// `input_grad` is false).
  Tensor backward(const Tensor& x, const Tensor& dy, bool input_grad = true);
  std::size_t out_size(std::size_t in) const { return (in + 2 * padding_ - kernel_) / stride_ + 1; }

  std::size_t in_channels() const { return cin_; }
  std::size_t out_channels() const { return cout_; }
  std::size_t kernel() const { return kernel_; }
  std::size_t stride() const { return stride_; }
  Param& weight() { return weight_; }
  Param& bias() { return bias_; }
  const Param& weight() const { return weight_; }
  const Param& bias() const { return bias_; }

 private:
  bool pointwise() const;
  std::vector<double> im2col(const Tensor& x) const;

  std::size_t cin_ = 0, cout_ = 0, kernel_ = 1, stride_ = 1, padding_ = 0;
  Param weight_, bias_;
};

/// Transposed convolution, weights laid out (k, k, cin, cout).
/// Output size is (in - 1) * stride - 2 * padding + kernel.
class ConvTranspose2d {
 public:
  ConvTranspose2d() = default;
  ConvTranspose2d(std::string name, std::size_t cin, std::size_t cout, std::size_t kernel,
                  std::size_t stride, std::size_t padding, Rng& rng);

  Tensor forward(const Tensor& x) const;
  Tensor backward(const Tensor& x, const Tensor& dy);
  std::size_t out_size(std::size_t in) const { return (in - 1) * stride_ + kernel_ - 2 * padding_; }

  std::size_t stride() const { return stride_; }
  std::size_t kernel() const { return kernel_; }
  Param& weight() { return weight_; }
  Param& bias() { return bias_; }
  const Param& weight() const { return weight_; }
  const Param& bias() const { return bias_; }

 private:
  std::size_t cin_ = 0, cout_ = 0, kernel_ = 2, stride_ = 2, padding_ = 0;
  Param weight_, bias_;
};

/// Batch normalization over (n, h, w) per channel. Training mode normalizes
/// with batch statistics and updates running averages (PyTorch convention:
/// running = (1 - momentum) * running + momentum * batch, unbiased variance).
class BatchNorm2d {
 public:
  struct Cache {
    Tensor x_hat;
    std::vector<double> inv_std;
  };

  BatchNorm2d() = default;
  BatchNorm2d(std::string name, std::size_t channels, double momentum = 0.1, double eps = 1e-5);

  Tensor forward_train(const Tensor& x, Cache& cache);
  /// Batch statistics without touching the running averages.
  Tensor forward_train_stateless(const Tensor& x, Cache& cache) const;
  Tensor forward_eval(const Tensor& x) const;
  Tensor backward(const Cache& cache, const Tensor& dy);

  Param& gamma() { return gamma_; }
  Param& beta() { return beta_; }
  const Param& gamma() const { return gamma_; }
  const Param& beta() const { return beta_; }
  std::vector<double>& running_mean() { return running_mean_; }
  std::vector<double>& running_var() { return running_var_; }
  const std::vector<double>& running_mean() const { return running_mean_; }
  const std::vector<double>& running_var() const { return running_var_; }

 private:
  Tensor normalize(const Tensor& x, Cache& cache, std::vector<double>* batch_mean,
                   std::vector<double>* batch_var) const;

  std::size_t channels_ = 0;
  double momentum_ = 0.1, eps_ = 1e-5;
  Param gamma_, beta_;
  std::vector<double> running_mean_, running_var_;
};

/// Group normalization (forward only; used inside the frozen backbone).
Tensor group_norm(const Tensor& x, std::size_t groups, const Param& gamma, const Param& beta,
                  double eps = 1e-5);

Tensor relu(const Tensor& x);
Tensor relu_backward(const Tensor& x, const Tensor& dy);
Tensor silu(const Tensor& x);
Tensor silu_backward(const Tensor& x, const Tensor& dy);

/// Nearest-neighbour upsampling by an integer factor.
Tensor upsample_nearest(const Tensor& x, std::size_t factor);

/// Corner-aligned bilinear resize: output pixel i samples source coordinate
/// i * (in - 1) / (out - 1) (or 0 when out == 1). Target must be at least the
/// source size on both axes.
Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w);
/// Adjoint of bilinear_resize with respect to its input.
Tensor bilinear_resize_backward(const Tensor& dy, std::size_t in_h, std::size_t in_w);

/// Adam with bias correction.
class Adam {
 public:
  Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const std::vector<Param*>& params);
  double learning_rate() const { return lr_; }
  std::int64_t steps_taken() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace pathseg::nn
