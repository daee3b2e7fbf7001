#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "pathseg/image_io.hpp"
#include "pathseg/mask.hpp"
#include "pathseg/tensor.hpp"

namespace pathseg {

/// Source-label -> target-class table. Targets equal to ignore_index mark
/// don't-care regions.
struct ClassMap {
  std::map<std::int32_t, std::int32_t> table;
  int num_classes = 0;
  int ignore_index = 0;
  std::vector<std::string> class_names;
  /// Unmapped source labels: error when strict, ignore otherwise.
  bool strict = true;

  static ClassMap identity(int num_classes);
  static ClassMap from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

/// Default BCSS grouping of the 22 source codes into tumor, stroma,
/// inflammatory, necrosis, other plus don't-care. This grouping is a
/// convention; edit config/bcss_classes.json to change it.
ClassMap bcss_default_class_map();

SegmentationMask remap_classes(const LabelImage& raw, const ClassMap& map);

struct RoiPatchPolicy {
  std::size_t window = 800;
  std::size_t stride = 400;
  double dontcare_threshold = 0.90;
  std::size_t crop = 768;

  void validate() const;
  nlohmann::json to_json() const;
};

/// Number of sliding-window positions along one axis.
std::size_t window_count(std::size_t length, std::size_t window, std::size_t stride);

struct LabeledImage {
  std::string id;
  Tensor image;
  SegmentationMask mask;
};

struct RoiExtraction {
  std::vector<LabeledImage> crops;
  std::size_t windows = 0;
  std::size_t dropped = 0;
};

/// Sliding windows at `stride`; windows whose don't-care fraction exceeds the
/// threshold are dropped; one seeded random crop per surviving window.
RoiExtraction extract_roi_patches(const std::string& roi_id, const Tensor& image, const SegmentationMask& mask,
                                  const RoiPatchPolicy& policy, std::uint64_t seed);

/// Half-pixel-centre bilinear resize (any size in either direction).
Tensor resize_bilinear(const Tensor& image, std::size_t out_h, std::size_t out_w);
/// Half-pixel-centre nearest-neighbour resize; preserves the label set.
SegmentationMask resize_nearest(const SegmentationMask& mask, std::size_t out_h, std::size_t out_w);
/// Image bilinear, mask nearest, both to target x target.
LabeledImage resize_to_target(const LabeledImage& item, std::size_t target);

/// In-memory dataset: named splits of labelled images.
struct Dataset {
  std::string name;
  int num_classes = 0;
  int ignore_index = 0;
  std::vector<std::string> class_names;
  std::map<std::string, std::vector<LabeledImage>> splits;

  const std::vector<LabeledImage>& split(const std::string& s) const;
};

struct SyntheticOptions {
  std::size_t n = 10;
  std::size_t n_val = 0;
  int num_classes = 5;
  std::uint64_t seed = 7;
  std::size_t image_size = 768;
  /// Relative class frequencies among non-ignore pixels; empty means
  /// p_c proportional to 1 / (c + 1.5).
  std::vector<double> priors;
  double ignore_fraction = 0.05;
  std::size_t cells = 16;
};

std::vector<double> default_synthetic_priors(int num_classes);

/// Voronoi mosaics of textured, class-coloured tissue with exact masks.
/// Deterministic per seed; images are 8-bit quantised so a disk round trip is
/// lossless.
Dataset generate_synthetic_dataset(const SyntheticOptions& options);
LabeledImage generate_synthetic_image(const SyntheticOptions& options, std::size_t index, const std::string& split);

/// Manifest entry paths are relative to the manifest's directory.
struct DatasetManifest {
  struct Item {
    std::string id;
    std::string image;
    std::string mask;
  };
  std::string name;
  int num_classes = 0;
  int ignore_index = 0;
  std::vector<std::string> class_names;
  std::map<std::string, std::vector<Item>> splits;
  nlohmann::json class_map;
  nlohmann::json patching;
  std::filesystem::path root;

  nlohmann::json to_json() const;
  static DatasetManifest from_json(const nlohmann::json& j, const std::filesystem::path& root);
  /// Throws ErrorKind::Validation for a referenced file that does not exist.
  void validate_files() const;
};

/// Writes images, indexed masks, palette.json and manifest.json under `dir`.
DatasetManifest write_dataset(const Dataset& ds, const std::filesystem::path& dir,
                              const nlohmann::json& class_map = nullptr, const nlohmann::json& patching = nullptr);
DatasetManifest read_manifest(const std::filesystem::path& manifest_path);
Dataset load_dataset(const DatasetManifest& manifest);

struct PrepareOptions {
  std::string dataset;  // bcss | glas | synthetic
  std::filesystem::path raw_root;
  std::filesystem::path out_dir;
  std::filesystem::path class_map_file;  // optional override for bcss
  RoiPatchPolicy policy{};
  std::size_t target = 768;
  std::uint64_t seed = 0;
  SyntheticOptions synthetic{};
};

/// Raw layout for bcss/glas: <root>/<split>/images/*.png and
/// <root>/<split>/masks/*.png with matching file names.
DatasetManifest prepare_data(const PrepareOptions& options);

}  // namespace pathseg
