#include "pathseg/patch_grid.hpp"

#include <cmath>
#include <cstring>

namespace pathseg {

PatchGrid tile(const Tensor& image, std::size_t G, std::size_t P) {
  require(G > 0 && P > 0, ErrorKind::Parameter, "grid size and patch size must be positive");
  require(image.n() == 1 && image.h() == G * P && image.w() == G * P, ErrorKind::Shape,
          "image " + image.shape_string() + " is not " + std::to_string(G * P) + "x" + std::to_string(G * P));
  PatchGrid grid{G, P, {}};
  grid.patches.reserve(G * G);
  for (std::size_t r = 0; r < G; ++r)
    for (std::size_t c = 0; c < G; ++c) grid.patches.push_back({{r, c}, image.crop(r * P, c * P, P, P)});
  return grid;
}

FeatureMap stitch_features(std::span<const FeatureMap> maps) {
  require(!maps.empty(), ErrorKind::Grid, "nothing to stitch");
  const auto G = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(maps.size()))));
  require(G * G == maps.size(), ErrorKind::Grid,
          std::to_string(maps.size()) + " feature maps do not form a square grid");
  const FeatureMap& first = maps.front();
  const std::size_t P = first.values.h();
  const std::size_t C = first.values.c();
  require(first.values.w() == P, ErrorKind::Shape, "patch feature maps must be square");

  std::vector<const FeatureMap*> slot(G * G, nullptr);
  for (const auto& fm : maps) {
    require(fm.patch_position.has_value(), ErrorKind::Grid, "feature map without a patch position");
    const auto [r, c] = *fm.patch_position;
    require(r < G && c < G, ErrorKind::Grid, "patch position outside the grid");
    require(slot[r * G + c] == nullptr, ErrorKind::Grid,
            "duplicate patch position (" + std::to_string(r) + ", " + std::to_string(c) + ")");
    require(fm.values.c() == C, ErrorKind::Shape, "channel count differs between patches");
    require(fm.values.h() == P && fm.values.w() == P && fm.values.n() == 1, ErrorKind::Shape,
            "patch feature maps differ in size");
    require(fm.block_slices == first.block_slices, ErrorKind::Shape, "block layout differs between patches");
    require(fm.timestep == first.timestep, ErrorKind::Shape, "timestep differs between patches");
    slot[r * G + c] = &fm;
  }

  FeatureMap out;
  out.values = Tensor(1, G * P, G * P, C);
  out.block_slices = first.block_slices;
  out.timestep = first.timestep;
  for (std::size_t r = 0; r < G; ++r)
    for (std::size_t c = 0; c < G; ++c) {
      const Tensor& src = slot[r * G + c]->values;
      for (std::size_t y = 0; y < P; ++y)
        std::memcpy(out.values.pixel(0, r * P + y, c * P), src.pixel(0, y, 0), P * C * sizeof(double));
    }
  return out;
}

FeatureMap extract_grid_features(const Backbone& backbone, const NoiseSchedule& schedule, const Tensor& image,
                                 const GridConfig& grid, const FeatureOptions& options, std::uint64_t image_id,
                                 const FeatureCache* cache) {
  const PatchGrid pg = tile(image, grid.size, grid.patch);
  std::vector<FeatureMap> maps;
  maps.reserve(pg.patches.size());
  for (std::size_t i = 0; i < pg.patches.size(); ++i) {
    FeatureOptions per_patch = options;
    per_patch.seed = patch_noise_seed(options.seed, image_id, i);
    std::optional<FeatureMap> fm;
    std::string key;
    if (cache) {
      key = FeatureCache::make_key(pg.patches[i].image, backbone, per_patch);
      fm = cache->get(key);
    }
    if (!fm) {
      fm = extract_features(backbone, schedule, pg.patches[i].image, per_patch);
      fm->patch_position = pg.patches[i].position;
      if (cache) cache->put(key, *fm, backbone.descriptor().hash(), per_patch.seed);
    }
    fm->patch_position = pg.patches[i].position;
    maps.push_back(std::move(*fm));
  }
  return stitch_features(maps);
}

}  // namespace pathseg
