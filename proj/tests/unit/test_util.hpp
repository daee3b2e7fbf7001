#pragma once

#include <filesystem>
#include <functional>
#include <random>
#include <string>

#include "doctest.h"
#include "pathseg/backbone.hpp"
#include "pathseg/error.hpp"
#include "pathseg/random.hpp"
#include "pathseg/tensor.hpp"

namespace test {

inline void check_kind(pathseg::ErrorKind kind, const std::function<void()>& f) {
  try {
    f();
    FAIL("expected " << std::string(pathseg::to_string(kind)) << " error, nothing thrown");
  } catch (const pathseg::Error& e) {
    CHECK_MESSAGE(e.kind() == kind, "expected " << std::string(pathseg::to_string(kind)) << ", got "
                                                << std::string(pathseg::to_string(e.kind())) << ": " << std::string(e.what()));
  }
}

inline pathseg::Tensor random_image(std::size_t h, std::size_t w, pathseg::Rng& rng) {
  pathseg::Tensor t = pathseg::Tensor::image(h, w, 3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (double& v : t.values()) v = u(rng);
  return t;
}

// Piecewise-constant 16x16 blocks of random colour.
inline pathseg::Tensor blocky_image(std::size_t h, std::size_t w, pathseg::Rng& rng) {
  pathseg::Tensor t = pathseg::Tensor::image(h, w, 3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::size_t bh = (h + 15) / 16, bw = (w + 15) / 16;
  std::vector<double> colours(bh * bw * 3);
  for (double& c : colours) c = u(rng);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) t(y, x, c) = colours[((y / 16) * bw + x / 16) * 3 + c];
  return t;
}

inline pathseg::Backbone frozen_toy(std::size_t patch = 256, std::uint64_t seed = 1234) {
  pathseg::Backbone::Options o;
  o.patch_size = patch;
  o.seed = seed;
  pathseg::Backbone bb = pathseg::Backbone::create_toy(o);
  bb.freeze();
  return bb;
}

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    static int counter = 0;
    std::random_device rd;
    path = std::filesystem::temp_directory_path() /
           ("pathseg_test_" + std::to_string(rd()) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

}  // namespace test
