#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "pathseg/mask.hpp"
#include "pathseg/tensor.hpp"

namespace pathseg {

/// Raw integer label image as read from disk (before class remapping).
struct LabelImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::int32_t> labels;
};

using Rgb = std::array<std::uint8_t, 3>;

/// 8-bit PNG to (H, W, 3) in [0, 1]. Gray and alpha inputs are converted.
Tensor read_png_rgb(const std::filesystem::path& path);
/// Values are clamped to [0, 1] and rounded to 8 bits.
void write_png_rgb(const std::filesystem::path& path, const Tensor& image);

/// Single-channel label PNG: palette indices for indexed files, gray level
/// for grayscale files.
LabelImage read_png_labels(const std::filesystem::path& path);
/// Indexed 8-bit PNG; `palette` supplies a colour per stored value.
void write_png_indexed(const std::filesystem::path& path, const SegmentationMask& mask,
                       const std::vector<Rgb>& palette);

/// Display colours for K classes followed by the ignore colour (black).
std::vector<Rgb> default_palette(int num_classes, int ignore_index);

}  // namespace pathseg
