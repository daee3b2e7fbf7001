#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "pathseg/features.hpp"

namespace pathseg {

struct GridConfig {
  std::size_t size = 3;    // G
  std::size_t patch = 256; // P
};

struct Patch {
  GridPosition position;
  Tensor image;
};

/// G x G non-overlapping patches of a (G*P)^2 image, row-major.
struct PatchGrid {
  std::size_t grid_size = 0;
  std::size_t patch_size = 0;
  std::vector<Patch> patches;
};

PatchGrid tile(const Tensor& image, std::size_t grid_size, std::size_t patch_size);

/// Mosaic per-patch feature maps back into one map. Every map must carry a
/// patch_position; positions must form a complete square grid.
FeatureMap stitch_features(std::span<const FeatureMap> maps);

/// Tile, extract per patch with a per-patch noise seed and conditioning
/// vector, then stitch.
FeatureMap extract_grid_features(const Backbone& backbone, const NoiseSchedule& schedule, const Tensor& image,
                                 const GridConfig& grid, const FeatureOptions& options, std::uint64_t image_id,
                                 const FeatureCache* cache = nullptr);

}  // namespace pathseg
