#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "pathseg/data.hpp"
#include "pathseg/image_io.hpp"
#include "test_util.hpp"

using namespace pathseg;

namespace {

// ROI whose mask is don't-care (ignore) over the left `frac` share of columns
// in every window-sized tile.
SegmentationMask roi_mask(std::size_t h, std::size_t w, double dontcare_frac) {
  SegmentationMask m(h, w, 5);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t local = x % 800;
      m.at(y, x) = local < static_cast<std::size_t>(dontcare_frac * 800) ? 5 : static_cast<int>((x + y) % 5);
    }
  return m;
}

std::size_t window_count_by_enumeration(std::size_t length, std::size_t window, std::size_t stride) {
  std::size_t n = 0;
  for (std::size_t start = 0; start + window <= length; start += stride) ++n;
  return n;
}

}  // namespace

TEST_SUITE("data") {
  TEST_CASE("remap: identity, all-to-ignore and strictness") {
    LabelImage raw{2, 3, {0, 1, 2, 2, 1, 0}};
    const auto id = remap_classes(raw, ClassMap::identity(3));
    CHECK(id.classes == raw.labels);
    CHECK(id.ignore_index == 3);

    ClassMap drop = ClassMap::identity(3);
    for (auto& [src, dst] : drop.table) dst = drop.ignore_index;
    const auto ignored = remap_classes(raw, drop);
    for (auto v : ignored.classes) CHECK(v == 3);

    LabelImage odd{1, 2, {0, 9}};
    test::check_kind(ErrorKind::Mapping, [&] { remap_classes(odd, ClassMap::identity(3)); });
    ClassMap lenient = ClassMap::identity(3);
    lenient.strict = false;
    CHECK(remap_classes(odd, lenient).classes == std::vector<std::int32_t>{0, 3});
  }

  TEST_CASE("property: remapping through an identity map is idempotent") {
    Rng rng(1);
    const ClassMap bcss = bcss_default_class_map();
    std::uniform_int_distribution<int> code(0, 21);
    for (int trial = 0; trial < 50; ++trial) {
      LabelImage raw{4, 4, std::vector<std::int32_t>(16)};
      for (auto& v : raw.labels) v = code(rng);
      const auto once = remap_classes(raw, bcss);
      ClassMap id = ClassMap::identity(bcss.num_classes);
      id.table[bcss.ignore_index] = bcss.ignore_index;
      const auto twice = remap_classes(LabelImage{4, 4, once.classes}, id);
      CHECK(twice.classes == once.classes);
      CHECK(once.valid());
    }
  }

  TEST_CASE("BCSS default table") {
    const ClassMap m = bcss_default_class_map();
    CHECK(m.num_classes == 5);
    CHECK(m.class_names == std::vector<std::string>{"tumor", "stroma", "inflammatory", "necrosis", "other"});
    CHECK(m.table.size() == 22);
    std::set<int> targets;
    for (auto [src, dst] : m.table) {
      CHECK((dst >= 0 && dst <= m.ignore_index));
      targets.insert(dst);
    }
    CHECK(targets.size() == 6);
    CHECK(m.table.at(0) == m.ignore_index);
    CHECK(m.table.at(1) == 0);
    CHECK(m.table.at(2) == 1);

    const ClassMap back = ClassMap::from_json(m.to_json());
    CHECK(back.table == m.table);
    CHECK(back.class_names == m.class_names);
    test::check_kind(ErrorKind::Config, [] { ClassMap::from_json(nlohmann::json{{"num_classes", "x"}}); });
  }

  TEST_CASE("shipped class-map file matches the built-in default") {
    const auto path = std::filesystem::path(PATHSEG_SOURCE_DIR) / "config" / "bcss_classes.json";
    std::ifstream in(path);
    REQUIRE(in.good());
    const ClassMap file = ClassMap::from_json(nlohmann::json::parse(in));
    CHECK(file.table == bcss_default_class_map().table);
  }

  TEST_CASE("window count formula agrees with enumeration") {
    CHECK(window_count(1600, 800, 400) == 3);
    CHECK(window_count(800, 800, 400) == 1);
    CHECK(window_count(799, 800, 400) == 0);
    for (std::size_t len = 0; len <= 3000; len += 37)
      for (std::size_t stride : {100u, 400u, 800u})
        CHECK(window_count(len, 800, stride) == window_count_by_enumeration(len, 800, stride));
  }

  TEST_CASE("ROI patching rules") {
    const RoiPatchPolicy policy;
    Rng rng(2);

    SUBCASE("800 ROI with half don't-care gives one crop") {
      const auto r = extract_roi_patches("roi", test::random_image(800, 800, rng), roi_mask(800, 800, 0.5), policy, 1);
      CHECK(r.windows == 1);
      REQUIRE(r.crops.size() == 1);
      CHECK(r.crops[0].image.h() == 768);
      CHECK(r.crops[0].mask.width == 768);
    }
    SUBCASE("95% don't-care is dropped, exactly 90% is kept") {
      CHECK(extract_roi_patches("a", test::random_image(800, 800, rng), roi_mask(800, 800, 0.95), policy, 1)
                .crops.empty());
      const auto kept = extract_roi_patches("b", test::random_image(800, 800, rng), roi_mask(800, 800, 0.90), policy, 1);
      CHECK(kept.crops.size() == 1);
      CHECK(kept.dropped == 0);
    }
    SUBCASE("1600x800 ROI yields three windows") {
      const auto r = extract_roi_patches("c", test::random_image(800, 1600, rng), roi_mask(800, 1600, 0.0), policy, 1);
      CHECK(r.windows == 3);
      CHECK(r.crops.size() == 3);
      std::set<std::string> ids;
      for (const auto& c : r.crops) ids.insert(c.id);
      CHECK(ids.size() == 3);
    }
    SUBCASE("ROI smaller than the window is skipped") {
      const auto r = extract_roi_patches("d", test::random_image(500, 900, rng), roi_mask(500, 900, 0.0), policy, 1);
      CHECK(r.windows == 0);
      CHECK(r.crops.empty());
    }
    SUBCASE("crops are seeded") {
      const Tensor img = test::random_image(800, 800, rng);
      const auto m = roi_mask(800, 800, 0.1);
      const auto a = extract_roi_patches("e", img, m, policy, 5), b = extract_roi_patches("e", img, m, policy, 5);
      CHECK(a.crops[0].image == b.crops[0].image);
      CHECK(a.crops[0].mask == b.crops[0].mask);
    }
    SUBCASE("policy validation") {
      RoiPatchPolicy bad;
      bad.crop = 900;
      test::check_kind(ErrorKind::Parameter, [&] { bad.validate(); });
      bad = RoiPatchPolicy{};
      bad.dontcare_threshold = 0.0;
      test::check_kind(ErrorKind::Parameter, [&] { bad.validate(); });
    }
  }

  TEST_CASE("property: lowering the threshold never emits more patches") {
    Rng rng(3);
    std::uniform_real_distribution<double> frac(0.0, 1.0);
    for (int trial = 0; trial < 20; ++trial) {
      // Random don't-care share per 400-column band.
      SegmentationMask m(800, 2000, 5, 0);
      std::vector<double> share(5);
      for (auto& s : share) s = frac(rng);
      for (std::size_t y = 0; y < 800; ++y)
        for (std::size_t x = 0; x < 2000; ++x)
          if (static_cast<double>(y) / 800.0 < share[x / 400]) m.at(y, x) = 5;
      const Tensor img = Tensor::image(800, 2000, 3, 0.5);
      std::size_t prev = 1000;
      for (double t : {1.0, 0.9, 0.75, 0.5, 0.25, 0.05}) {
        RoiPatchPolicy p;
        p.dontcare_threshold = t;
        const auto r = extract_roi_patches("roi", img, m, p, 0);
        CHECK(r.crops.size() <= prev);
        CHECK(r.crops.size() + r.dropped == r.windows);
        for (const auto& c : r.crops) {
          CHECK(c.mask.valid());
          CHECK(c.image.h() == 768);
        }
        prev = r.crops.size();
      }
    }
  }

  TEST_CASE("resize to target") {
    Rng rng(4);
    LabeledImage item{"g", test::random_image(522, 775, rng), SegmentationMask(522, 775, 2)};
    for (std::size_t i = 0; i < item.mask.size(); ++i) item.mask.classes[i] = (i / 7) % 3 == 0 ? 2 : (i % 2);
    const auto out = resize_to_target(item, 768);
    CHECK(out.image.h() == 768);
    CHECK(out.image.w() == 768);
    CHECK(out.mask.height == 768);
    const std::set<int> before(item.mask.classes.begin(), item.mask.classes.end());
    const std::set<int> after(out.mask.classes.begin(), out.mask.classes.end());
    CHECK(std::includes(before.begin(), before.end(), after.begin(), after.end()));

    LabeledImage same{"s", test::random_image(768, 768, rng), SegmentationMask(768, 768, 2, 1)};
    const auto same_out = resize_to_target(same, 768);
    CHECK(same_out.image == same.image);
    CHECK(same_out.mask == same.mask);
  }

  TEST_CASE("synthetic generator") {
    SyntheticOptions o;
    o.n = 3;
    o.image_size = 128;
    const Dataset a = generate_synthetic_dataset(o), b = generate_synthetic_dataset(o);
    REQUIRE(a.split("train").size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(a.split("train")[i].image == b.split("train")[i].image);
      CHECK(a.split("train")[i].mask == b.split("train")[i].mask);
    }
    o.seed = 8;
    CHECK_FALSE(generate_synthetic_dataset(o).split("train")[0].mask == a.split("train")[0].mask);
    test::check_kind(ErrorKind::Config, [&] { a.split("test"); });

    SyntheticOptions ten;
    ten.n = 10;
    ten.image_size = 768;
    const Dataset d = generate_synthetic_dataset(ten);
    CHECK(d.num_classes == 5);
    CHECK(d.class_names.size() == 5);
    for (const auto& item : d.split("train")) {
      CHECK(item.mask.valid());
      CHECK(item.image.h() == 768);
      for (double v : item.image.values()) CHECK_UNARY(v * 255.0 == std::round(v * 255.0));
    }
  }

  TEST_CASE("synthetic class frequencies follow the priors over 100 images") {
    SyntheticOptions o;
    o.n = 100;
    o.image_size = 128;
    std::vector<double> counts(5, 0.0);
    double total = 0;
    for (std::size_t i = 0; i < o.n; ++i) {
      const auto item = generate_synthetic_image(o, i, "train");
      for (auto v : item.mask.classes)
        if (v != item.mask.ignore_index) {
          counts[v] += 1;
          total += 1;
        }
    }
    const auto priors = default_synthetic_priors(5);
    for (std::size_t c = 0; c < 5; ++c) {
      MESSAGE("class " << c << " freq " << counts[c] / total << " prior " << priors[c]);
      CHECK(std::abs(counts[c] / total - priors[c]) <= 0.05);
    }
  }

  TEST_CASE("manifest round trip through disk") {
    test::TempDir dir;
    SyntheticOptions o;
    o.n = 2;
    o.n_val = 1;
    o.image_size = 64;
    const Dataset ds = generate_synthetic_dataset(o);
    const auto manifest = write_dataset(ds, dir.path);
    CHECK(std::filesystem::exists(dir.path / "manifest.json"));
    CHECK(std::filesystem::exists(dir.path / "palette.json"));
    const auto back = load_dataset(read_manifest(dir.path / "manifest.json"));
    CHECK(back.num_classes == ds.num_classes);
    REQUIRE(back.split("val").size() == 1);
    for (const auto& s : {"train", "val"})
      for (std::size_t i = 0; i < ds.split(s).size(); ++i) {
        CHECK(back.split(s)[i].image == ds.split(s)[i].image);
        CHECK(back.split(s)[i].mask == ds.split(s)[i].mask);
      }
    std::filesystem::remove(dir.path / manifest.splits.at("train")[0].mask);
    test::check_kind(ErrorKind::Validation, [&] { read_manifest(dir.path / "manifest.json").validate_files(); });
  }

  TEST_CASE("prepare-data on raw BCSS and GlaS layouts") {
    test::TempDir raw, out;
    Rng rng(6);
    // BCSS: one 800x1600 ROI with source codes.
    std::filesystem::create_directories(raw.path / "bcss/train/images");
    std::filesystem::create_directories(raw.path / "bcss/train/masks");
    write_png_rgb(raw.path / "bcss/train/images/roi1.png", test::random_image(800, 1600, rng));
    SegmentationMask codes(800, 1600, 22, 255, 0);
    for (std::size_t i = 0; i < codes.size(); ++i) codes.classes[i] = 1 + static_cast<int>(i % 4);
    write_png_indexed(raw.path / "bcss/train/masks/roi1.png", codes, default_palette(22, 255));

    PrepareOptions p;
    p.dataset = "bcss";
    p.raw_root = raw.path / "bcss";
    p.out_dir = out.path / "bcss";
    const auto m = prepare_data(p);
    CHECK(m.num_classes == 5);
    CHECK(m.splits.at("train").size() == 3);
    const auto ds = load_dataset(m);
    for (const auto& item : ds.split("train")) {
      CHECK(item.image.h() == 768);
      CHECK(item.mask.valid());
    }

    // GlaS: arbitrary size, binary gland masks with instance ids.
    std::filesystem::create_directories(raw.path / "glas/train/images");
    std::filesystem::create_directories(raw.path / "glas/train/masks");
    write_png_rgb(raw.path / "glas/train/images/g1.png", test::random_image(52, 77, rng));
    SegmentationMask inst(52, 77, 255, 255, 0);
    for (std::size_t i = 0; i < inst.size(); ++i) inst.classes[i] = (i % 77) > 40 ? static_cast<int>(1 + i % 3) : 0;
    write_png_indexed(raw.path / "glas/train/masks/g1.png", inst, default_palette(255, 255));
    p.dataset = "glas";
    p.raw_root = raw.path / "glas";
    p.out_dir = out.path / "glas";
    p.target = 64;
    const auto g = load_dataset(prepare_data(p));
    CHECK(g.num_classes == 2);
    const auto& gi = g.split("train").at(0);
    CHECK(gi.image.h() == 64);
    const std::set<int> labels(gi.mask.classes.begin(), gi.mask.classes.end());
    CHECK(labels == std::set<int>{0, 1});

    p.dataset = "camelyon";
    test::check_kind(ErrorKind::Config, [&] { prepare_data(p); });
  }
}

TEST_SUITE("io") {
  TEST_CASE("PNG round trips") {
    test::TempDir dir;
    Rng rng(7);
    Tensor img = test::random_image(13, 17, rng);
    for (double& v : img.values()) v = std::round(v * 255.0) / 255.0;
    write_png_rgb(dir.path / "a.png", img);
    CHECK(read_png_rgb(dir.path / "a.png") == img);

    SegmentationMask m(9, 11, 5);
    for (std::size_t i = 0; i < m.size(); ++i) m.classes[i] = static_cast<int>(i % 6);
    write_png_indexed(dir.path / "m.png", m, default_palette(5, 5));
    const auto back = read_png_labels(dir.path / "m.png");
    CHECK(back.labels == m.classes);
    CHECK(back.height == 9);
    test::check_kind(ErrorKind::Io, [&] { read_png_rgb(dir.path / "missing.png"); });
    CHECK(default_palette(5, 5).size() == 6);
  }
}
