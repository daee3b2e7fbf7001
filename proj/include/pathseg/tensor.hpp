#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "pathseg/error.hpp"

namespace pathseg {

/// Dense NHWC tensor of doubles. Images, latents, activations and feature maps
/// all use this layout; single images carry n == 1.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t n, std::size_t h, std::size_t w, std::size_t c, double fill = 0.0)
      : n_(n), h_(h), w_(w), c_(c), data_(n * h * w * c, fill) {}

  static Tensor image(std::size_t h, std::size_t w, std::size_t c, double fill = 0.0) {
    return Tensor(1, h, w, c, fill);
  }

  std::size_t n() const { return n_; }
  std::size_t h() const { return h_; }
  std::size_t w() const { return w_; }
  std::size_t c() const { return c_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  bool same_shape(const Tensor& o) const {
    return n_ == o.n_ && h_ == o.h_ && w_ == o.w_ && c_ == o.c_;
  }
  std::string shape_string() const;

  std::size_t index(std::size_t b, std::size_t y, std::size_t x, std::size_t ch) const {
    return ((b * h_ + y) * w_ + x) * c_ + ch;
  }
  double& at(std::size_t b, std::size_t y, std::size_t x, std::size_t ch) {
    return data_[index(b, y, x, ch)];
  }
  double at(std::size_t b, std::size_t y, std::size_t x, std::size_t ch) const {
    return data_[index(b, y, x, ch)];
  }
  // Single-image accessors.
  double& operator()(std::size_t y, std::size_t x, std::size_t ch) { return at(0, y, x, ch); }
  double operator()(std::size_t y, std::size_t x, std::size_t ch) const { return at(0, y, x, ch); }

  double* pixel(std::size_t b, std::size_t y, std::size_t x) { return data_.data() + index(b, y, x, 0); }
  const double* pixel(std::size_t b, std::size_t y, std::size_t x) const {
    return data_.data() + index(b, y, x, 0);
  }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  /// Copy of one batch item as an n == 1 tensor.
  Tensor item(std::size_t b) const;
  /// Write an n == 1 tensor into batch slot b.
  void set_item(std::size_t b, const Tensor& src);
  /// Channels [begin, end) of every pixel.
  Tensor channel_slice(std::size_t begin, std::size_t end) const;
  /// Rows [y0, y0+hh) and columns [x0, x0+ww).
  Tensor crop(std::size_t y0, std::size_t x0, std::size_t hh, std::size_t ww) const;

  bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.same_shape(b) && a.data_ == b.data_;
  }

 private:
  std::size_t n_ = 0, h_ = 0, w_ = 0, c_ = 0;
  std::vector<double> data_;
};

/// Stack n == 1 tensors of identical shape along the batch axis.
Tensor stack(std::span<const Tensor> items);
/// Concatenate along channels; all inputs share n, h, w.
Tensor concat_channels(std::span<const Tensor> parts);

}  // namespace pathseg
