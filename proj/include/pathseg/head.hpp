#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "pathseg/mask.hpp"
#include "pathseg/nn.hpp"
#include "pathseg/tensor.hpp"

namespace pathseg {

/// Raw per-pixel class logits, shape (n, H, W, K).
struct ClassScores {
  Tensor logits;
};

/// Upsampling schedule mapping feature resolution to image resolution:
/// two transposed-conv strides (1 or 2) and a residual integer bilinear
/// factor applied to the logits.
struct StridePlan {
  std::size_t first = 1;
  std::size_t second = 1;
  std::size_t residual = 1;
  std::size_t total() const { return first * second * residual; }
};

/// Throws ErrorKind::Shape unless output / input is a positive power of two.
StridePlan derive_stride_plan(std::size_t input_size, std::size_t output_size);

struct HeadConfig {
  std::size_t in_channels = 80;
  std::size_t num_classes = 5;
  /// Output widths of conv1, tconv1, tconv2.
  std::vector<std::size_t> widths{256, 128, 64};
  std::size_t first_kernel = 3;
  std::size_t input_size = 768;
  std::size_t output_size = 768;
  double bn_momentum = 0.1;
  std::uint64_t seed = 0;
};

/// Fully convolutional head:
///   conv(k) -> BN -> ReLU -> tconv(s1) -> BN -> ReLU -> tconv(s2) -> BN -> ReLU
///   -> conv 1x1 to K -> bilinear x residual.
/// A 1x1 conv commutes with bilinear resizing, so applying the classifier
/// before the residual upsampling equals applying it at full resolution.
class SegmentationHead {
 public:
  struct Trace {
    Tensor input;
    Tensor a1, a2, a3;  // pre-BN
    Tensor r1, r2, r3;  // post-ReLU inputs to the next layer
    Tensor n1, n2, n3;  // post-BN, pre-ReLU
    nn::BatchNorm2d::Cache c1, c2, c3;
    Tensor low_logits;
  };

  explicit SegmentationHead(const HeadConfig& config);

  const HeadConfig& config() const { return config_; }
  const StridePlan& plan() const { return plan_; }

  /// Inference (running BN statistics).
  ClassScores forward(const Tensor& features) const;
  /// Training forward; batch statistics, updates running averages unless
  /// `update_running_stats` is false.
  ClassScores forward_train(const Tensor& features, Trace& trace, bool update_running_stats = true);
  /// Accumulates parameter gradients for dL/dlogits.
  void backward(const Trace& trace, const Tensor& dlogits);

  std::vector<nn::Param*> params();
  void zero_grad();
  void zero_final_layer();
  std::size_t parameter_count() const;
  std::uint64_t weight_hash() const;

  void save(const std::filesystem::path& path) const;
  static SegmentationHead load(const std::filesystem::path& path);

 private:
  void check_input(const Tensor& f) const;

  HeadConfig config_;
  StridePlan plan_;
  nn::Conv2d conv1_;
  nn::BatchNorm2d bn1_;
  nn::ConvTranspose2d up1_;
  nn::BatchNorm2d bn2_;
  nn::ConvTranspose2d up2_;
  nn::BatchNorm2d bn3_;
  nn::Conv2d classifier_;
};

/// Softmax over the class axis.
Tensor softmax(const Tensor& logits);

/// Per-pixel argmax of batch item `item`; ties go to the lowest class index.
SegmentationMask predict_mask(const ClassScores& scores, std::size_t item = 0);

}  // namespace pathseg
