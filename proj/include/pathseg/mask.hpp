#pragma once

#include <cstdint>
#include <vector>

#include "pathseg/error.hpp"

namespace pathseg {

/// Per-pixel class ids in [0, K) plus a reserved ignore value (default K).
struct SegmentationMask {
  std::size_t height = 0;
  std::size_t width = 0;
  int num_classes = 0;
  int ignore_index = 0;
  std::vector<std::int32_t> classes;

  SegmentationMask() = default;
  SegmentationMask(std::size_t h, std::size_t w, int k, std::int32_t fill = 0)
      : SegmentationMask(h, w, k, k, fill) {}
  SegmentationMask(std::size_t h, std::size_t w, int k, int ignore, std::int32_t fill)
      : height(h), width(w), num_classes(k), ignore_index(ignore), classes(h * w, fill) {}

  std::int32_t& at(std::size_t y, std::size_t x) { return classes[y * width + x]; }
  std::int32_t at(std::size_t y, std::size_t x) const { return classes[y * width + x]; }
  std::size_t size() const { return classes.size(); }
  bool is_ignore(std::size_t i) const { return classes[i] == ignore_index; }

  /// Every value is a class id or the ignore value.
  bool valid() const {
    for (auto v : classes)
      if (v != ignore_index && (v < 0 || v >= num_classes)) return false;
    return true;
  }
  void validate() const {
    require(ignore_index < 0 || ignore_index >= num_classes, ErrorKind::Validation,
            "ignore index collides with a class id");
    require(classes.size() == height * width, ErrorKind::Shape, "mask storage does not match its dims");
    require(valid(), ErrorKind::Validation, "mask contains ids outside [0, K) and the ignore value");
  }

  friend bool operator==(const SegmentationMask&, const SegmentationMask&) = default;
};

}  // namespace pathseg
