#include <algorithm>
#include <set>

#include "doctest.h"
#include "pathseg/features.hpp"
#include "pathseg/patch_grid.hpp"
#include "test_util.hpp"

using namespace pathseg;

namespace {

BlockActivation activation(std::size_t h, std::size_t w, std::size_t c) {
  return BlockActivation{"b", Tensor::image(h, w, c), 0};
}

}  // namespace

TEST_SUITE("features") {
  TEST_CASE("bilinear: constant map stays constant") {
    auto a = activation(8, 8, 2);
    for (std::size_t i = 0; i < a.values.size(); ++i) a.values.values()[i] = (i % 2) ? -1.25 : 3.5;
    const Tensor up = bilinear_upsample(a, 256, 256);
    REQUIRE(up.same_shape(Tensor::image(256, 256, 2)));
    for (std::size_t i = 0; i < up.size(); ++i) CHECK(up.values()[i] == ((i % 2) ? -1.25 : 3.5));
  }

  TEST_CASE("bilinear: 2x2 to 4x4 closed form") {
    // Corner-aligned: output (i, j) samples source (i/3, j/3), so for
    // [[0,1],[2,3]] the value is 2*(i/3) + (j/3).
    auto a = activation(2, 2, 1);
    a.values(0, 0, 0) = 0;
    a.values(0, 1, 0) = 1;
    a.values(1, 0, 0) = 2;
    a.values(1, 1, 0) = 3;
    const Tensor up = bilinear_upsample(a, 4, 4);
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j)
        CHECK(up(i, j, 0) == doctest::Approx(2.0 * i / 3.0 + j / 3.0).epsilon(1e-14));
  }

  TEST_CASE("bilinear: same size is the identity, smaller target is rejected") {
    Rng rng(1);
    auto a = activation(5, 7, 3);
    std::normal_distribution<double> nd;
    for (double& v : a.values.values()) v = nd(rng);
    CHECK(bilinear_upsample(a, 5, 7) == a.values);
    test::check_kind(ErrorKind::Parameter, [&] { bilinear_upsample(a, 4, 7); });
  }

  TEST_CASE("property: bilinear upsampling preserves the value range and is linear") {
    Rng rng(2);
    std::uniform_int_distribution<std::size_t> dim(1, 6), up(0, 9);
    std::normal_distribution<double> nd;
    for (int trial = 0; trial < 60; ++trial) {
      const std::size_t h = dim(rng), w = dim(rng);
      auto a = activation(h, w, 2), b = activation(h, w, 2), s = activation(h, w, 2);
      for (std::size_t i = 0; i < a.values.size(); ++i) {
        a.values.values()[i] = nd(rng);
        b.values.values()[i] = nd(rng);
        s.values.values()[i] = a.values.values()[i] + b.values.values()[i];
      }
      const std::size_t H = h + up(rng), W = w + up(rng);
      const Tensor ua = bilinear_upsample(a, H, W), ub = bilinear_upsample(b, H, W), us = bilinear_upsample(s, H, W);
      const auto [lo, hi] = std::minmax_element(a.values.values().begin(), a.values.values().end());
      for (std::size_t i = 0; i < ua.size(); ++i) {
        CHECK(ua.values()[i] >= *lo - 1e-12);
        CHECK(ua.values()[i] <= *hi + 1e-12);
        CHECK(std::abs(us.values()[i] - ua.values()[i] - ub.values()[i]) < 1e-12);
      }
    }
  }

  TEST_CASE("block selection canonicalization") {
    const auto d = Backbone::create_toy().descriptor();
    CHECK(resolve_block_selection(d, {"all"}) == std::vector<std::size_t>{0, 1, 2, 3, 4});
    CHECK(resolve_block_selection(d, {"up_3", "middle", "up_3"}) == std::vector<std::size_t>{0, 3});
    test::check_kind(ErrorKind::Parameter, [&] { resolve_block_selection(d, {}); });
    test::check_kind(ErrorKind::Parameter, [&] { resolve_block_selection(d, {"up_7"}); });
  }

  TEST_CASE("extract_features on a 256 patch") {
    const Backbone bb = test::frozen_toy();
    const auto s = build_schedule();
    Rng rng(3);
    const Tensor x = test::random_image(256, 256, rng);
    FeatureOptions o;
    o.seed = 42;

    const FeatureMap all = extract_features(bb, s, x, o);
    CHECK(all.values.same_shape(Tensor::image(256, 256, 80)));
    CHECK(all.timestep == 50);
    CHECK(all.slices_consistent());
    CHECK(all.block_slices.front().first == "middle");
    CHECK(all.block_slices.front().second == ChannelRange{0, 32});
    CHECK(all.block_slices.back().second == ChannelRange{72, 80});

    const FeatureMap again = extract_features(bb, s, x, o);
    CHECK(again.values == all.values);

    o.blocks = {"middle"};
    const FeatureMap mid = extract_features(bb, s, x, o);
    CHECK(mid.channels() == 32);
    CHECK(mid.values == all.block("middle"));

    o.blocks = {"all"};
    o.seed = 43;
    CHECK_FALSE(extract_features(bb, s, x, o).values == all.values);

    o.timestep = 1001;
    test::check_kind(ErrorKind::Timestep, [&] { extract_features(bb, s, x, o); });
    o.timestep = -1;
    test::check_kind(ErrorKind::Timestep, [&] { extract_features(bb, s, x, o); });
    o.timestep = 50;
    o.blocks = {};
    test::check_kind(ErrorKind::Parameter, [&] { extract_features(bb, s, x, o); });
  }

  TEST_CASE("t=0 feeds the clean latent") {
    const Backbone bb = test::frozen_toy(64);
    const auto s = build_schedule();
    Rng rng(4);
    const Tensor x = test::random_image(64, 64, rng);
    FeatureOptions o;
    o.timestep = 0;
    o.seed = 1;
    const FeatureMap a = extract_features(bb, s, x, o);
    o.seed = 2;
    CHECK(extract_features(bb, s, x, o).values == a.values);
    CHECK(a.timestep == 0);
  }

  TEST_CASE("property: any block subset equals the matching slices of the full map") {
    const Backbone bb = test::frozen_toy(64);
    const auto s = build_schedule();
    Rng rng(5);
    const Tensor x = test::random_image(64, 64, rng);
    FeatureOptions o;
    o.seed = 9;
    o.feature_size = 16;
    const FeatureMap full = extract_features(bb, s, x, o);
    const auto& ids = bb.descriptor().block_ids;
    for (unsigned mask = 1; mask < (1u << ids.size()); ++mask) {
      std::vector<std::string> sel;
      for (std::size_t i = 0; i < ids.size(); ++i)
        if (mask & (1u << i)) sel.push_back(ids[ids.size() - 1 - i]);  // reversed request order
      o.blocks = sel;
      const FeatureMap sub = extract_features(bb, s, x, o);
      CHECK(sub.slices_consistent());
      std::size_t expected_c = 0;
      for (const auto& [id, range] : sub.block_slices) {
        CHECK(sub.block(id) == full.block(id));
        expected_c += range.size();
      }
      CHECK(sub.channels() == expected_c);
      CHECK(sub.block_slices.size() == sel.size());
    }
  }

  TEST_CASE("feature cache round trip") {
    test::TempDir dir;
    const Backbone bb = test::frozen_toy(64);
    Rng rng(6);
    const Tensor x = test::random_image(64, 64, rng);
    FeatureOptions o;
    o.seed = 3;
    FeatureMap fm = extract_features(bb, build_schedule(), x, o);
    fm.patch_position = GridPosition{1, 2};
    const FeatureCache cache(dir.path);
    const auto key = FeatureCache::make_key(x, bb, o);
    CHECK_FALSE(cache.get(key).has_value());
    cache.put(key, fm, bb.descriptor().hash(), o.seed);
    const auto back = cache.get(key);
    REQUIRE(back.has_value());
    CHECK(back->values == fm.values);
    CHECK(back->block_slices == fm.block_slices);
    CHECK(back->patch_position == fm.patch_position);
    CHECK(back->timestep == fm.timestep);

    FeatureOptions other = o;
    other.timestep = 10;
    CHECK(FeatureCache::make_key(x, bb, other) != key);
    other = o;
    other.seed = 4;
    CHECK(FeatureCache::make_key(x, bb, other) != key);
    test::check_kind(ErrorKind::Load, [&] { read_feature_record(dir.path / "nope.feat"); });
  }
}

TEST_SUITE("patch_grid") {
  TEST_CASE("tile shapes") {
    Rng rng(1);
    const Tensor big = test::random_image(768, 768, rng);
    const auto grid = tile(big, 3, 256);
    REQUIRE(grid.patches.size() == 9);
    CHECK(grid.patches[5].position == GridPosition{1, 2});
    CHECK(grid.patches[5].image == big.crop(256, 512, 256, 256));

    const Tensor small = test::random_image(256, 256, rng);
    const auto one = tile(small, 1, 256);
    REQUIRE(one.patches.size() == 1);
    CHECK(one.patches[0].image == small);

    test::check_kind(ErrorKind::Shape, [&] { tile(test::random_image(768, 512, rng), 3, 256); });
  }

  TEST_CASE("stitch of nine constant maps is block constant") {
    std::vector<FeatureMap> maps;
    for (std::size_t r = 0; r < 3; ++r)
      for (std::size_t c = 0; c < 3; ++c) {
        FeatureMap fm;
        fm.values = Tensor::image(4, 4, 2, static_cast<double>(r * 3 + c));
        fm.block_slices = {{"middle", {0, 2}}};
        fm.patch_position = GridPosition{r, c};
        maps.push_back(fm);
      }
    std::swap(maps[0], maps[7]);  // order of the input list does not matter
    const FeatureMap out = stitch_features(maps);
    REQUIRE(out.values.same_shape(Tensor::image(12, 12, 2)));
    CHECK_FALSE(out.patch_position.has_value());
    for (std::size_t y = 0; y < 12; ++y)
      for (std::size_t x = 0; x < 12; ++x)
        for (std::size_t c = 0; c < 2; ++c) CHECK(out.values(y, x, c) == static_cast<double>((y / 4) * 3 + x / 4));

    auto dup = maps;
    dup[1].patch_position = dup[0].patch_position;
    test::check_kind(ErrorKind::Grid, [&] { stitch_features(dup); });
    auto missing = maps;
    missing.pop_back();
    test::check_kind(ErrorKind::Grid, [&] { stitch_features(missing); });
    auto wide = maps;
    wide[3].values = Tensor::image(4, 4, 3);
    test::check_kind(ErrorKind::Shape, [&] { stitch_features(wide); });
  }

  TEST_CASE("property: tile then stitch is the identity on 100 random 768 images") {
    Rng rng(7);
    std::uniform_int_distribution<int> g(1, 3);
    for (int trial = 0; trial < 100; ++trial) {
      const Tensor img = test::random_image(768, 768, rng);
      const std::size_t G = trial % 2 ? 3 : static_cast<std::size_t>(g(rng));
      const std::size_t P = 768 / G;
      if (768 % G) continue;
      const auto grid = tile(img, G, P);
      std::vector<FeatureMap> maps;
      for (const auto& p : grid.patches) {
        FeatureMap fm;
        fm.values = p.image;
        fm.block_slices = {{"rgb", {0, 3}}};
        fm.patch_position = p.position;
        maps.push_back(std::move(fm));
      }
      std::shuffle(maps.begin(), maps.end(), rng);
      CHECK(stitch_features(maps).values == img);
    }
  }

  TEST_CASE("grid features on a constant image repeat per patch at t=0") {
    // At t=0 no noise enters, so every patch of a constant image yields the
    // same feature tile and the stitched map is periodic in P.
    const Backbone bb = test::frozen_toy(64);
    const Tensor img = Tensor::image(192, 192, 3, 0.6);
    FeatureOptions o;
    o.timestep = 0;
    o.feature_size = 16;
    const FeatureMap fm = extract_grid_features(bb, build_schedule(), img, GridConfig{3, 64}, o, 11);
    REQUIRE(fm.values.same_shape(Tensor::image(48, 48, 80)));
    for (std::size_t y = 0; y < 48; ++y)
      for (std::size_t x = 0; x < 48; ++x)
        for (std::size_t c = 0; c < 80; c += 7) CHECK(fm.values(y, x, c) == fm.values(y % 16, x % 16, c));
  }

  TEST_CASE("grid features use distinct noise per patch and are reproducible") {
    const Backbone bb = test::frozen_toy(64);
    const Tensor img = Tensor::image(128, 128, 3, 0.6);
    FeatureOptions o;
    o.timestep = 200;
    o.feature_size = 8;
    o.seed = 5;
    const auto s = build_schedule();
    const FeatureMap a = extract_grid_features(bb, s, img, GridConfig{2, 64}, o, 11);
    const FeatureMap b = extract_grid_features(bb, s, img, GridConfig{2, 64}, o, 11);
    CHECK(a.values == b.values);
    CHECK_FALSE(a.values.crop(0, 0, 8, 8) == a.values.crop(0, 8, 8, 8));
    CHECK_FALSE(extract_grid_features(bb, s, img, GridConfig{2, 64}, o, 12).values == a.values);
    std::set<std::uint64_t> seeds;
    for (std::size_t p = 0; p < 9; ++p) seeds.insert(patch_noise_seed(5, 11, p));
    CHECK(seeds.size() == 9);
  }

  TEST_CASE("grid features match the cache") {
    test::TempDir dir;
    const Backbone bb = test::frozen_toy(64);
    Rng rng(8);
    const Tensor img = test::random_image(128, 128, rng);
    FeatureOptions o;
    o.feature_size = 8;
    const FeatureCache cache(dir.path);
    const auto s = build_schedule();
    const FeatureMap cold = extract_grid_features(bb, s, img, GridConfig{2, 64}, o, 1, &cache);
    const FeatureMap warm = extract_grid_features(bb, s, img, GridConfig{2, 64}, o, 1, &cache);
    CHECK(cold.values == warm.values);
    CHECK(cold.values == extract_grid_features(bb, s, img, GridConfig{2, 64}, o, 1).values);
  }
}
