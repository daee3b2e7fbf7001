#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "pathseg/schedule.hpp"
#include "pathseg/tensor.hpp"

namespace pathseg {

inline constexpr const char* kConditionToySsl = "toy-ssl";
inline constexpr const char* kConditionNone = "none";

/// Conditioning embedding y. `source` names the producing encoder; "none"
/// marks the unconditional variant.
struct ConditioningVector {
  std::vector<double> values;
  std::string source;
};

/// Shape of the denoiser UNet. Down path: `level_channels.size()` resolution
/// levels with `blocks_per_level` residual blocks each and a stride-2
/// downsample between levels. Up path mirrors it with `blocks_per_level + 1`
/// blocks per level, each consuming one skip connection, so the number of
/// upsampling blocks is levels * (blocks_per_level + 1).
struct UNetConfig {
  std::vector<std::size_t> level_channels{8, 16};
  std::size_t blocks_per_level = 1;
  std::size_t middle_channels = 32;
  std::size_t time_dim = 32;
  std::size_t cond_tokens = 4;
  std::size_t attn_dim = 16;

  std::size_t num_up_blocks() const { return level_channels.size() * (blocks_per_level + 1); }
  friend bool operator==(const UNetConfig&, const UNetConfig&) = default;
};

/// UNet layout that yields the 13 taps (middle + 12 upsampling blocks) of a
/// Stable-Diffusion-sized denoiser.
UNetConfig full_scale_unet_config();

struct BackboneDescriptor {
  std::size_t latent_downsample_factor = 8;
  std::size_t latent_channels = 4;
  std::size_t patch_size = 256;
  std::size_t cond_dim = 64;
  /// "middle" first, then "up_1".."up_B" shallow to deep.
  std::vector<std::string> block_ids;
  std::vector<std::size_t> block_channels;
  std::string cross_attention = "one-per-block";
  bool frozen = true;

  static BackboneDescriptor from_unet(const UNetConfig& unet, std::size_t patch_size = 256,
                                      std::size_t cond_dim = 64);
  /// Throws ErrorKind::Validation on a violated invariant.
  void validate() const;
  /// Position of `id` in block_ids; throws ErrorKind::Parameter if unknown.
  std::size_t block_index(const std::string& id) const;
  std::uint64_t hash() const;
  /// Structural equality; the frozen flag is ignored.
  bool same_layout(const BackboneDescriptor& o) const;
};

struct BlockActivation {
  std::string block_id;
  Tensor values;
  int timestep = 0;
};

struct AePretrainOptions {
  int steps = 1000;
  std::size_t batch = 4;
  std::size_t crop = 64;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
};

struct AePretrainReport {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double latent_scale = 1.0;
};

/// Frozen feature-producing stack: autoencoder encoder, toy self-supervised
/// conditioning encoder and a conditional denoising UNet with feature taps.
class Backbone {
 public:
  struct Options {
    std::uint64_t seed = 1234;
    std::size_t patch_size = 256;
    std::size_t cond_dim = 64;
    UNetConfig unet{};
    std::string conditioning = kConditionToySsl;
    /// Multiplier on the initial weights of the last layer in every residual
    /// branch. Small values keep an untrained UNet near its skip path so the
    /// taps retain latent structure.
    double residual_gain = 0.1;
  };

  /// Randomly initialised toy stack. Not frozen until freeze() is called, so
  /// the autoencoder can be pre-trained first.
  static Backbone create_toy(const Options& options);
  static Backbone create_toy() { return create_toy(Options{}); }

  /// Loads weights and descriptor; the result is frozen. When `expected` is
  /// given, a layout mismatch is a validation error.
  static Backbone load(const std::filesystem::path& path, const BackboneDescriptor* expected = nullptr);
  void save(const std::filesystem::path& path) const;

  Backbone(Backbone&&) noexcept;
  Backbone& operator=(Backbone&&) noexcept;
  Backbone(const Backbone&);
  Backbone& operator=(const Backbone&);
  ~Backbone();

  const BackboneDescriptor& descriptor() const;
  const UNetConfig& unet_config() const;
  bool frozen() const;
  void freeze();

  /// Selects what encode_condition returns: "toy-ssl" or "none".
  void set_conditioning(const std::string& mode);
  const std::string& conditioning() const;

  /// x: (H, W, 3) in [0, 1], H and W divisible by the downsample factor.
  Latent encode_image(const Tensor& x) const;
  /// x must be patch_size x patch_size x 3.
  ConditioningVector encode_condition(const Tensor& x) const;
  /// Learned constant used by the unconditional variant.
  ConditioningVector null_condition() const;

  /// One denoiser forward pass. Returns one activation per descriptor block,
  /// in descriptor order. Timestep 0 (clean latent) is accepted for the
  /// feature pipeline's passthrough mode.
  std::vector<BlockActivation> run_unet_with_taps(const Latent& z, const ConditioningVector& y) const;

  /// Reconstruction-loss pre-training of the autoencoder on random crops of
  /// `images` (decoder discarded afterwards). Sets latent_scale so encoded
  /// latents have unit standard deviation. Fails on a frozen backbone.
  AePretrainReport pretrain_autoencoder(std::span<const Tensor> images, const AePretrainOptions& options);

  double latent_scale() const;
  std::uint64_t weight_hash() const;
  std::size_t parameter_count() const;

 private:
  struct Impl;
  explicit Backbone(std::unique_ptr<Impl> impl);
  std::unique_ptr<Impl> impl_;
};

}  // namespace pathseg
