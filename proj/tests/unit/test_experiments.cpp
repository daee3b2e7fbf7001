#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "pathseg/experiments.hpp"
#include "test_util.hpp"

using namespace pathseg;
using nlohmann::json;

namespace {

// Small enough to run in a couple of seconds: 64 px images, one patch,
// 8 px features, tiny head.
json tiny_config(const std::filesystem::path& out) {
  json c = default_config();
  c["output_dir"] = out.string();
  c["dataset"]["synthetic"]["n"] = 2;
  c["dataset"]["synthetic"]["n_val"] = 1;
  c["dataset"]["synthetic"]["image_size"] = 64;
  c["dataset"]["synthetic"]["num_classes"] = 3;
  c["backbone"]["ae_pretrain_steps"] = 2;
  c["grid"]["size"] = 1;
  c["grid"]["patch"] = 64;
  c["features"]["size"] = 8;
  c["head"]["widths"] = {4, 4, 4};
  c["train"]["steps"] = 3;
  return c;
}

std::size_t csv_rows(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) ++n;
  return n - 1;
}

}  // namespace

TEST_SUITE("experiments") {
  TEST_CASE("presets") {
    const json desk = default_config();
    CHECK(desk["train"]["learning_rate"] == 1e-4);
    CHECK(desk["train"]["timestep"] == 50);
    CHECK(desk["diffusion"]["T"] == 1000);
    CHECK(desk["grid"]["size"] == 3);
    CHECK(desk["grid"]["patch"] == 256);
    const json full = default_config("full");
    CHECK(full["head"]["widths"] == json::array({256, 128, 64}));
    CHECK(full["features"]["size"] == 0);
    validate_config(desk);
    validate_config(full);
    test::check_kind(ErrorKind::Config, [] { default_config("huge"); });
  }

  TEST_CASE("layered resolution: preset, file, environment, overrides") {
    test::TempDir dir;
    {
      std::ofstream(dir.path / "c.json") << R"({"train": {"steps": 7, "timestep": 10}, "seed": 3})";
    }
    ::setenv("PATHSEG_OUTPUT_DIR", "/tmp/from_env", 1);
    const json c = resolve_config(dir.path / "c.json", {"train.timestep=200", "dataset.name=bcss"});
    ::unsetenv("PATHSEG_OUTPUT_DIR");
    CHECK(c["train"]["steps"] == 7);
    CHECK(c["train"]["timestep"] == 200);
    CHECK(c["seed"] == 3);
    CHECK(c["output_dir"] == "/tmp/from_env");
    CHECK(c["dataset"]["name"] == "bcss");
    CHECK(c["train"]["learning_rate"] == 1e-4);

    test::check_kind(ErrorKind::Config, [] { resolve_config({}, {"train.momentum=0.9"}); });
    test::check_kind(ErrorKind::Config, [] { resolve_config({}, {"train=3"}); });
    {
      std::ofstream(dir.path / "bad.json") << R"({"trian": {}})";
    }
    test::check_kind(ErrorKind::Config, [&] { resolve_config(dir.path / "bad.json", {}); });
    test::check_kind(ErrorKind::Config, [&] { resolve_config(dir.path / "absent.json", {}); });
  }

  TEST_CASE("validation rejects out-of-range values") {
    auto bad = [](const std::string& key, json value) {
      json c = default_config();
      json* node = &c;
      std::string rest = key;
      for (auto dot = rest.find('.'); dot != std::string::npos; dot = rest.find('.')) {
        node = &(*node)[rest.substr(0, dot)];
        rest = rest.substr(dot + 1);
      }
      (*node)[rest] = value;
      test::check_kind(ErrorKind::Config, [&] { validate_config(c); });
    };
    bad("train.timestep", 1001);
    bad("train.learning_rate", -1.0);
    bad("train.steps", 0);
    bad("head.widths", json::array({8, 8}));
    bad("dataset.name", "imagenet");
    bad("metrics.f1_average", "geometric");
    bad("backbone.layout", "huge");
    bad("grid.size", 0);
  }

  TEST_CASE("train, evaluate and reload a tiny run") {
    test::TempDir dir;
    const json c = tiny_config(dir.path / "run");
    const RunOutput out = run_training(c);
    for (const char* f : {"config.json", "backbone.ckpt", "head.ckpt", "head_best.ckpt", "train_log.jsonl",
                          "metrics.json", "metrics.csv", "checkpoints"})
      CHECK_MESSAGE(std::filesystem::exists(out.dir / f), f);
    CHECK(out.validation.has_value());
    std::ifstream in(out.dir / "metrics.json");
    const json m = json::parse(in);
    CHECK(m.contains("train"));
    CHECK(m.contains("validation"));
    CHECK(m["selection"] == "last_epoch");

    const json ev = evaluate({out.dir, {}, "val", dir.path / "masks"});
    CHECK(ev["aggregate"]["accuracy"].get<double>() >= 0.0);
    CHECK(ev["images"].size() == 1);
    CHECK(std::filesystem::exists(dir.path / "masks" / "palette.json"));
    test::check_kind(ErrorKind::Config, [&] { evaluate({out.dir, {}, "test", {}}); });

    // Determinism: a second run with the same config writes the same log.
    json c2 = c;
    c2["output_dir"] = (dir.path / "run2").string();
    run_training(c2);
    std::ifstream a(out.dir / "train_log.jsonl"), b(dir.path / "run2" / "train_log.jsonl");
    std::stringstream sa, sb;
    sa << a.rdbuf();
    sb << b.rdbuf();
    CHECK(sa.str() == sb.str());
  }

  TEST_CASE("sweeps reject bad values before running anything") {
    test::TempDir dir;
    const json c = tiny_config(dir.path / "x");
    test::check_kind(ErrorKind::Timestep, [&] { run_timestep_sweep(c, {10, 1001}, {dir.path / "t"}); });
    test::check_kind(ErrorKind::Parameter, [&] { run_lr_sweep(c, {1e-3, 0.0}, {dir.path / "l"}); });
    test::check_kind(ErrorKind::Parameter, [&] { run_block_sweep(c, {{"middle"}, {}}, {dir.path / "b"}); });
    test::check_kind(ErrorKind::Parameter, [&] { run_block_sweep(c, {{"up_9"}}, {dir.path / "b"}); });
    CHECK_FALSE(std::filesystem::exists(dir.path / "t" / "t_10"));
  }

  TEST_CASE("timestep sweep drops duplicates and runs in parallel") {
    test::TempDir dir;
    json c = tiny_config(dir.path / "x");
    c["dataset"]["synthetic"]["n_val"] = 0;
    c["train"]["steps"] = 1;
    const auto r = run_timestep_sweep(c, {0, 10, 10}, {dir.path / "sweep", 2});
    CHECK(r.rows == 2);
    CHECK(csv_rows(r.csv) == 2);
    CHECK(std::filesystem::exists(r.plot));
  }

  TEST_CASE("plot renders line and bar charts") {
    test::TempDir dir;
    {
      std::ofstream(dir.path / "n.csv") << "t,accuracy,dice\n0,0.5,0.4\n10,0.6,0.5\n";
      std::ofstream(dir.path / "s.csv") << "selection,accuracy\nmiddle,0.5\nall,0.7\n";
    }
    plot_csv(dir.path / "n.csv", dir.path / "n.svg", "timestep");
    plot_csv(dir.path / "s.csv", dir.path / "s.svg");
    std::ifstream n(dir.path / "n.svg"), s(dir.path / "s.svg");
    std::stringstream ns, ss;
    ns << n.rdbuf();
    ss << s.rdbuf();
    CHECK(ns.str().find("<polyline") != std::string::npos);
    CHECK(ss.str().find("<rect") != std::string::npos);
    test::check_kind(ErrorKind::Io, [&] { plot_csv(dir.path / "none.csv", dir.path / "x.svg"); });
  }
}
