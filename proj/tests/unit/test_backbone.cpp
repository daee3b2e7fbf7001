#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "pathseg/backbone.hpp"
#include "pathseg/checkpoint.hpp"
#include "test_util.hpp"

using namespace pathseg;

TEST_SUITE("backbone") {
  TEST_CASE("toy descriptor") {
    const Backbone bb = Backbone::create_toy();
    const auto& d = bb.descriptor();
    CHECK(d.block_ids == std::vector<std::string>{"middle", "up_1", "up_2", "up_3", "up_4"});
    CHECK(d.block_channels == std::vector<std::size_t>{32, 16, 16, 8, 8});
    CHECK(d.latent_downsample_factor == 8);
    CHECK(d.latent_channels == 4);
    CHECK_FALSE(bb.frozen());
    CHECK_THROWS_AS(d.block_index("up_9"), Error);
  }

  TEST_CASE("encode_image shapes") {
    const Backbone bb = Backbone::create_toy();
    Rng rng(1);
    CHECK(bb.encode_image(test::random_image(256, 256, rng)).values.same_shape(Tensor::image(32, 32, 4)));
    CHECK(bb.encode_image(test::random_image(768, 768, rng)).values.same_shape(Tensor::image(96, 96, 4)));
    CHECK(bb.encode_image(test::random_image(256, 256, rng)).timestep == 0);
    test::check_kind(ErrorKind::Shape, [&] { bb.encode_image(test::random_image(250, 250, rng)); });
  }

  TEST_CASE("conditioning encoder") {
    Backbone bb = Backbone::create_toy();
    Rng rng(2);
    const Tensor x = test::random_image(256, 256, rng);
    const auto y1 = bb.encode_condition(x), y2 = bb.encode_condition(x);
    CHECK(y1.values == y2.values);
    CHECK(y1.values.size() == bb.descriptor().cond_dim);
    CHECK(y1.source == "toy-ssl");
    for (double v : y1.values) CHECK(std::isfinite(v));
    test::check_kind(ErrorKind::Shape, [&] { bb.encode_condition(test::random_image(128, 128, rng)); });

    bb.set_conditioning("none");
    const auto yn = bb.encode_condition(x);
    CHECK(yn.source == "none");
    CHECK(yn.values == bb.null_condition().values);
    CHECK(yn.values == bb.encode_condition(test::random_image(256, 256, rng)).values);
    CHECK_THROWS_AS(bb.set_conditioning("clip"), Error);
  }

  TEST_CASE("UNet taps follow the descriptor") {
    const Backbone bb = test::frozen_toy();
    Rng rng(3);
    const Tensor x = test::random_image(256, 256, rng);
    const Latent z = noise_latent(bb.encode_image(x), 50, build_schedule(), 5);
    const auto y = bb.encode_condition(x);
    const auto acts = bb.run_unet_with_taps(z, y);
    REQUIRE(acts.size() == 5);
    const std::size_t sides[] = {16, 16, 32, 32, 32};
    for (std::size_t i = 0; i < acts.size(); ++i) {
      CHECK(acts[i].block_id == bb.descriptor().block_ids[i]);
      CHECK(acts[i].values.c() == bb.descriptor().block_channels[i]);
      CHECK(acts[i].values.h() == sides[i]);
      CHECK(acts[i].timestep == 50);
      CHECK(acts[i].values.all_finite());
    }
    const auto again = bb.run_unet_with_taps(z, y);
    for (std::size_t i = 0; i < acts.size(); ++i) CHECK(acts[i].values == again[i].values);

    ConditioningVector bad{std::vector<double>(7, 0.0), "toy-ssl"};
    test::check_kind(ErrorKind::Shape, [&] { bb.run_unet_with_taps(z, bad); });
  }

  TEST_CASE("thirteen-tap topology") {
    // Full-scale block structure at reduced width so it runs in a unit test.
    UNetConfig u = full_scale_unet_config();
    CHECK(u.num_up_blocks() == 12);
    u.level_channels = {4, 4, 8, 8};
    u.middle_channels = 8;
    u.time_dim = 8;
    u.attn_dim = 8;
    Backbone::Options o;
    o.unet = u;
    o.patch_size = 64;
    Backbone bb = Backbone::create_toy(o);
    bb.freeze();
    REQUIRE(bb.descriptor().block_ids.size() == 13);
    CHECK(bb.descriptor().block_ids.back() == "up_12");
    Rng rng(4);
    const Tensor x = test::random_image(64, 64, rng);
    const auto acts = bb.run_unet_with_taps(bb.encode_image(x), bb.encode_condition(x));
    CHECK(acts.size() == 13);
    Backbone unfrozen = Backbone::create_toy(o);
    test::check_kind(ErrorKind::Validation,
                     [&] { unfrozen.run_unet_with_taps(unfrozen.encode_image(x), unfrozen.encode_condition(x)); });

    const auto full = BackboneDescriptor::from_unet(full_scale_unet_config());
    CHECK(full.block_ids.size() == 13);
    CHECK(full.block_channels.front() == 1280);
  }

  TEST_CASE("descriptor validation") {
    BackboneDescriptor d = Backbone::create_toy().descriptor();
    d.validate();
    BackboneDescriptor empty = d;
    empty.block_ids.clear();
    empty.block_channels.clear();
    test::check_kind(ErrorKind::Validation, [&] { empty.validate(); });
    BackboneDescriptor ragged = d;
    ragged.block_channels.pop_back();
    test::check_kind(ErrorKind::Validation, [&] { ragged.validate(); });
  }

  TEST_CASE("checkpoint round trip and load failures") {
    test::TempDir dir;
    Backbone bb = Backbone::create_toy();
    bb.freeze();
    const auto path = dir.path / "bb.ckpt";
    bb.save(path);
    const Backbone loaded = Backbone::load(path);
    CHECK(loaded.frozen());
    CHECK(loaded.weight_hash() == bb.weight_hash());
    Rng rng(6);
    const Tensor x = test::random_image(256, 256, rng);
    const Latent z = noise_latent(bb.encode_image(x), 10, build_schedule(), 1);
    const auto a = bb.run_unet_with_taps(z, bb.encode_condition(x));
    const auto b = loaded.run_unet_with_taps(z, loaded.encode_condition(x));
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].values == b[i].values);
    CHECK(loaded.encode_image(x).values == bb.encode_image(x).values);

    test::check_kind(ErrorKind::Load, [&] { Backbone::load(dir.path / "missing.ckpt"); });
    {
      std::ofstream(dir.path / "junk.ckpt") << "not a checkpoint";
    }
    test::check_kind(ErrorKind::Load, [&] { Backbone::load(dir.path / "junk.ckpt"); });
    {
      // Truncate the payload.
      const auto size = std::filesystem::file_size(path);
      std::filesystem::copy_file(path, dir.path / "short.ckpt");
      std::filesystem::resize_file(dir.path / "short.ckpt", size - 100);
    }
    test::check_kind(ErrorKind::Load, [&] { Backbone::load(dir.path / "short.ckpt"); });

    {
      Checkpoint ck = Checkpoint::load(path);
      Checkpoint stripped;
      for (const auto& [k, v] : ck.metadata())
        if (k != "block_channels") stripped.set(k, v);
      for (const auto& arr : ck.arrays()) stripped.add_array(arr.name, arr.shape, arr.data);
      stripped.save(dir.path / "nochan.ckpt");
    }
    test::check_kind(ErrorKind::Validation, [&] { Backbone::load(dir.path / "nochan.ckpt"); });

    BackboneDescriptor other = bb.descriptor();
    other.block_channels[0] = 64;
    test::check_kind(ErrorKind::Validation, [&] { Backbone::load(path, &other); });
  }

  TEST_CASE("frozen backbone refuses pre-training") {
    Backbone bb = Backbone::create_toy();
    bb.freeze();
    Rng rng(7);
    std::vector<Tensor> imgs{test::random_image(64, 64, rng)};
    AePretrainOptions o;
    o.steps = 1;
    test::check_kind(ErrorKind::Validation, [&] { bb.pretrain_autoencoder(imgs, o); });
  }

  TEST_CASE("autoencoder pre-training lowers reconstruction loss and normalizes latents") {
    Backbone bb = Backbone::create_toy();
    Rng rng(8);
    std::vector<Tensor> imgs;
    for (int i = 0; i < 2; ++i) imgs.push_back(test::blocky_image(128, 128, rng));
    AePretrainOptions o;
    o.steps = 60;
    o.batch = 2;
    const auto rep = bb.pretrain_autoencoder(imgs, o);
    CHECK(rep.final_loss < rep.initial_loss);
    const auto z = bb.encode_image(imgs[0]);
    double sq = 0, mean = 0;
    for (double v : z.values.values()) mean += v;
    mean /= static_cast<double>(z.values.size());
    for (double v : z.values.values()) sq += (v - mean) * (v - mean);
    const double sd = std::sqrt(sq / static_cast<double>(z.values.size()));
    CHECK(sd == doctest::Approx(1.0).epsilon(0.5));
  }
}
