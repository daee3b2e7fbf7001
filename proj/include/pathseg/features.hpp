#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "pathseg/backbone.hpp"
#include "pathseg/schedule.hpp"
#include "pathseg/tensor.hpp"

namespace pathseg {

struct ChannelRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  friend bool operator==(const ChannelRange&, const ChannelRange&) = default;
};

struct GridPosition {
  std::size_t row = 0;
  std::size_t col = 0;
  friend bool operator==(const GridPosition&, const GridPosition&) = default;
};

/// Pixel-aligned features: selected block activations upsampled to a common
/// resolution and concatenated along channels in descriptor order.
struct FeatureMap {
  Tensor values;
  std::vector<std::pair<std::string, ChannelRange>> block_slices;
  int timestep = 0;
  std::optional<GridPosition> patch_position;

  std::size_t channels() const { return values.c(); }
  /// Channels belonging to one block; throws ErrorKind::Parameter if absent.
  Tensor block(const std::string& id) const;
  /// Checks that slices are disjoint, ordered and cover [0, C).
  bool slices_consistent() const;
};

/// Corner-aligned bilinear upsampling of one activation to (H, W).
Tensor bilinear_upsample(const BlockActivation& a, std::size_t H, std::size_t W);

/// Canonical block selection: descriptor indices in descriptor order,
/// duplicates removed. "all" expands to every block. Empty or unknown ids are
/// parameter errors.
std::vector<std::size_t> resolve_block_selection(const BackboneDescriptor& d,
                                                 const std::vector<std::string>& ids);

struct FeatureOptions {
  int timestep = 50;
  std::vector<std::string> blocks{"all"};
  std::uint64_t seed = 0;
  /// Side length the activations are aligned to; 0 means the patch size.
  std::size_t feature_size = 0;
};

/// encode_condition -> encode_image -> noise_latent -> UNet taps -> bilinear
/// alignment -> channel concatenation. t == 0 feeds the clean latent.
FeatureMap extract_features(const Backbone& backbone, const NoiseSchedule& schedule, const Tensor& patch,
                            const FeatureOptions& options);

/// Noise seed for one patch of one image within a run.
std::uint64_t patch_noise_seed(std::uint64_t run_seed, std::uint64_t image_id, std::size_t patch_index);

/// On-disk feature cache: one `<key>.feat` record plus `<key>.json` manifest
/// per patch.
///
/// Record layout, all integers little-endian:
///
///     char[8]  magic "PSDFEAT1"
///     u64      descriptor hash
///     u64      noise seed
///     i32      timestep
///     u32      height, width, channels
///     u32      block count, then per block: u32 name length, name bytes,
///              u32 channel begin, u32 channel end
///     u8       has position, u32 row, u32 col
///     f64      values[height * width * channels]   (row-major, channels last)
///
/// Writers go through a temporary file and rename, so readers never see a
/// partial record.
class FeatureCache {
 public:
  explicit FeatureCache(std::filesystem::path dir);

  static std::string make_key(const Tensor& patch, const Backbone& backbone, const FeatureOptions& options);

  std::optional<FeatureMap> get(const std::string& key) const;
  void put(const std::string& key, const FeatureMap& fm, std::uint64_t descriptor_hash, std::uint64_t seed) const;
  const std::filesystem::path& dir() const { return dir_; }

 private:
  std::filesystem::path dir_;
};

void write_feature_record(const std::filesystem::path& path, const FeatureMap& fm, std::uint64_t descriptor_hash,
                          std::uint64_t seed);
FeatureMap read_feature_record(const std::filesystem::path& path, std::uint64_t* descriptor_hash = nullptr,
                               std::uint64_t* seed = nullptr);

}  // namespace pathseg
