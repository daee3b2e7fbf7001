#include "pathseg/tensor.hpp"

#include <cmath>
#include <cstring>

namespace pathseg {

const char* to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::Parameter: return "parameter error";
    case ErrorKind::Timestep: return "timestep error";
    case ErrorKind::Shape: return "shape error";
    case ErrorKind::Load: return "load error";
    case ErrorKind::Validation: return "validation error";
    case ErrorKind::Grid: return "grid error";
    case ErrorKind::Mapping: return "mapping error";
    case ErrorKind::DegenerateData: return "degenerate data";
    case ErrorKind::Undefined: return "undefined result";
    case ErrorKind::Config: return "config error";
    case ErrorKind::Runtime: return "runtime error";
    case ErrorKind::Io: return "io error";
  }
  return "error";
}

std::string Tensor::shape_string() const {
  return "(" + std::to_string(n_) + ", " + std::to_string(h_) + ", " + std::to_string(w_) +
         ", " + std::to_string(c_) + ")";
}

Tensor Tensor::item(std::size_t b) const {
  require(b < n_, ErrorKind::Shape, "batch index out of range");
  Tensor out(1, h_, w_, c_);
  const std::size_t stride = h_ * w_ * c_;
  std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(b * stride), stride, out.data_.begin());
  return out;
}

void Tensor::set_item(std::size_t b, const Tensor& src) {
  require(b < n_ && src.n_ == 1 && src.h_ == h_ && src.w_ == w_ && src.c_ == c_, ErrorKind::Shape,
          "set_item: shape mismatch " + src.shape_string() + " into " + shape_string());
  std::copy(src.data_.begin(), src.data_.end(),
            data_.begin() + static_cast<std::ptrdiff_t>(b * h_ * w_ * c_));
}

Tensor Tensor::channel_slice(std::size_t begin, std::size_t end) const {
  require(begin <= end && end <= c_, ErrorKind::Shape, "channel slice out of range");
  const std::size_t cc = end - begin;
  Tensor out(n_, h_, w_, cc);
  const std::size_t pixels = n_ * h_ * w_;
  for (std::size_t p = 0; p < pixels; ++p) {
    std::memcpy(out.data_.data() + p * cc, data_.data() + p * c_ + begin, cc * sizeof(double));
  }
  return out;
}

Tensor Tensor::crop(std::size_t y0, std::size_t x0, std::size_t hh, std::size_t ww) const {
  require(y0 + hh <= h_ && x0 + ww <= w_, ErrorKind::Shape, "crop out of bounds");
  Tensor out(n_, hh, ww, c_);
  for (std::size_t b = 0; b < n_; ++b) {
    for (std::size_t y = 0; y < hh; ++y) {
      std::memcpy(out.pixel(b, y, 0), pixel(b, y0 + y, x0), ww * c_ * sizeof(double));
    }
  }
  return out;
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor stack(std::span<const Tensor> items) {
  require(!items.empty(), ErrorKind::Shape, "stack of zero tensors");
  const Tensor& first = items.front();
  Tensor out(items.size(), first.h(), first.w(), first.c());
  for (std::size_t i = 0; i < items.size(); ++i) out.set_item(i, items[i]);
  return out;
}

Tensor concat_channels(std::span<const Tensor> parts) {
  require(!parts.empty(), ErrorKind::Shape, "concat of zero tensors");
  const Tensor& first = parts.front();
  std::size_t total = 0;
  for (const auto& p : parts) {
    require(p.n() == first.n() && p.h() == first.h() && p.w() == first.w(), ErrorKind::Shape,
            "concat_channels: spatial mismatch " + p.shape_string() + " vs " + first.shape_string());
    total += p.c();
  }
  Tensor out(first.n(), first.h(), first.w(), total);
  const std::size_t pixels = first.n() * first.h() * first.w();
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const double* src = p.values().data();
    double* dst = out.values().data();
    for (std::size_t px = 0; px < pixels; ++px) {
      std::memcpy(dst + px * total + offset, src + px * p.c(), p.c() * sizeof(double));
    }
    offset += p.c();
  }
  return out;
}

}  // namespace pathseg
