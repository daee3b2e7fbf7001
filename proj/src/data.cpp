#include "pathseg/data.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "pathseg/random.hpp"

namespace pathseg {

// ---------------------------------------------------------------------------
// Class maps

ClassMap ClassMap::identity(int num_classes) {
  ClassMap m;
  m.num_classes = num_classes;
  m.ignore_index = num_classes;
  for (int k = 0; k < num_classes; ++k) {
    m.table[k] = k;
    m.class_names.push_back("class_" + std::to_string(k));
  }
  m.table[num_classes] = num_classes;
  return m;
}

ClassMap bcss_default_class_map() {
  ClassMap m;
  m.num_classes = 5;
  m.ignore_index = 5;
  m.class_names = {"tumor", "stroma", "inflammatory", "necrosis", "other"};
  enum { Tumor = 0, Stroma = 1, Inflammatory = 2, Necrosis = 3, Other = 4, DontCare = 5 };
  // BCSS codes 0..21.
  const std::pair<int, int> table[] = {
      {0, DontCare},      // outside_roi
      {1, Tumor},         // tumor
      {2, Stroma},        // stroma
      {3, Inflammatory},  // lymphocytic_infiltrate
      {4, Necrosis},      // necrosis_or_debris
      {5, Other},         // glandular_secretions
      {6, Other},         // blood
      {7, DontCare},      // exclude
      {8, Other},         // metaplasia_NOS
      {9, Other},         // fat
      {10, Inflammatory}, // plasma_cells
      {11, Inflammatory}, // other_immune_infiltrate
      {12, Other},        // mucoid_material
      {13, Other},        // normal_acinus_or_duct
      {14, Other},        // lymphatics
      {15, DontCare},     // undetermined
      {16, Other},        // nerve
      {17, Other},        // skin_adnexa
      {18, Other},        // blood_vessel
      {19, Tumor},        // angioinvasion
      {20, Tumor},        // dcis
      {21, Other},        // other
  };
  for (auto [src, dst] : table) m.table[src] = dst;
  return m;
}

ClassMap ClassMap::from_json(const nlohmann::json& j) {
  try {
    ClassMap m;
    m.num_classes = j.at("num_classes").get<int>();
    m.ignore_index = j.value("ignore_index", m.num_classes);
    m.strict = j.value("strict", true);
    m.class_names = j.value("class_names", std::vector<std::string>{});
    for (const auto& [k, v] : j.at("table").items()) m.table[std::stoi(k)] = v.get<int>();
    for (auto [src, dst] : m.table) {
      require(dst == m.ignore_index || (dst >= 0 && dst < m.num_classes), ErrorKind::Config,
              "class map target " + std::to_string(dst) + " outside [0, K) and the ignore index");
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Config, std::string("malformed class map: ") + e.what());
  }
}

nlohmann::json ClassMap::to_json() const {
  nlohmann::json j;
  j["num_classes"] = num_classes;
  j["ignore_index"] = ignore_index;
  j["strict"] = strict;
  j["class_names"] = class_names;
  for (auto [src, dst] : table) j["table"][std::to_string(src)] = dst;
  return j;
}

SegmentationMask remap_classes(const LabelImage& raw, const ClassMap& map) {
  SegmentationMask m(raw.height, raw.width, map.num_classes, map.ignore_index, map.ignore_index);
  for (std::size_t i = 0; i < raw.labels.size(); ++i) {
    auto it = map.table.find(raw.labels[i]);
    if (it == map.table.end()) {
      if (map.strict) fail(ErrorKind::Mapping, "source label " + std::to_string(raw.labels[i]) + " is not mapped");
      continue;
    }
    m.classes[i] = it->second;
  }
  return m;
}

// ---------------------------------------------------------------------------
// ROI patching

void RoiPatchPolicy::validate() const {
  require(window > 0 && stride > 0 && crop > 0, ErrorKind::Parameter, "patch policy sizes must be positive");
  require(crop <= window, ErrorKind::Parameter, "crop larger than window");
  require(dontcare_threshold > 0.0 && dontcare_threshold <= 1.0, ErrorKind::Parameter,
          "don't-care threshold must be in (0, 1]");
}

nlohmann::json RoiPatchPolicy::to_json() const {
  return {{"window", window}, {"stride", stride}, {"dontcare_threshold", dontcare_threshold}, {"crop", crop}};
}

std::size_t window_count(std::size_t length, std::size_t window, std::size_t stride) {
  if (length < window || stride == 0) return 0;
  return (length - window) / stride + 1;
}

RoiExtraction extract_roi_patches(const std::string& roi_id, const Tensor& image, const SegmentationMask& mask,
                                  const RoiPatchPolicy& policy, std::uint64_t seed) {
  policy.validate();
  require(image.h() == mask.height && image.w() == mask.width, ErrorKind::Shape, "ROI image and mask differ in size");
  RoiExtraction out;
  if (image.h() < policy.window || image.w() < policy.window) {
    spdlog::warn("ROI {} ({}x{}) is smaller than the {}px window; skipped", roi_id, image.h(), image.w(), policy.window);
    return out;
  }
  const std::size_t ny = window_count(image.h(), policy.window, policy.stride);
  const std::size_t nx = window_count(image.w(), policy.window, policy.stride);
  const double area = static_cast<double>(policy.window * policy.window);
  for (std::size_t wy = 0; wy < ny; ++wy)
    for (std::size_t wx = 0; wx < nx; ++wx) {
      ++out.windows;
      const std::size_t y0 = wy * policy.stride, x0 = wx * policy.stride;
      std::size_t dontcare = 0;
      for (std::size_t y = y0; y < y0 + policy.window; ++y)
        for (std::size_t x = x0; x < x0 + policy.window; ++x) dontcare += mask.at(y, x) == mask.ignore_index;
      if (static_cast<double>(dontcare) / area > policy.dontcare_threshold) {
        ++out.dropped;
        continue;
      }
      Rng rng(derive_seed({seed, hash_string(roi_id), wy, wx}));
      std::uniform_int_distribution<std::size_t> off(0, policy.window - policy.crop);
      const std::size_t cy = y0 + off(rng), cx = x0 + off(rng);
      LabeledImage item;
      item.id = roi_id + "_y" + std::to_string(y0) + "_x" + std::to_string(x0);
      item.image = image.crop(cy, cx, policy.crop, policy.crop);
      item.mask = SegmentationMask(policy.crop, policy.crop, mask.num_classes, mask.ignore_index, 0);
      for (std::size_t y = 0; y < policy.crop; ++y)
        for (std::size_t x = 0; x < policy.crop; ++x) item.mask.at(y, x) = mask.at(cy + y, cx + x);
      out.crops.push_back(std::move(item));
    }
  return out;
}

// ---------------------------------------------------------------------------
// Resizing

namespace {

double source_coord(std::size_t o, std::size_t in, std::size_t out) {
  return (static_cast<double>(o) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
}

}  // namespace

Tensor resize_bilinear(const Tensor& image, std::size_t out_h, std::size_t out_w) {
  require(out_h > 0 && out_w > 0 && image.h() > 0 && image.w() > 0, ErrorKind::Parameter, "resize needs positive dims");
  if (out_h == image.h() && out_w == image.w()) return image;
  Tensor out(image.n(), out_h, out_w, image.c());
  auto clampi = [](double v, std::size_t hi) {
    return static_cast<std::size_t>(std::clamp(v, 0.0, static_cast<double>(hi)));
  };
  for (std::size_t b = 0; b < image.n(); ++b)
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const double sy = std::clamp(source_coord(oy, image.h(), out_h), 0.0, static_cast<double>(image.h() - 1));
      const std::size_t y0 = clampi(std::floor(sy), image.h() - 1), y1 = std::min(y0 + 1, image.h() - 1);
      const double fy = sy - static_cast<double>(y0);
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const double sx = std::clamp(source_coord(ox, image.w(), out_w), 0.0, static_cast<double>(image.w() - 1));
        const std::size_t x0 = clampi(std::floor(sx), image.w() - 1), x1 = std::min(x0 + 1, image.w() - 1);
        const double fx = sx - static_cast<double>(x0);
        for (std::size_t c = 0; c < image.c(); ++c) {
          const double top = (1 - fx) * image.at(b, y0, x0, c) + fx * image.at(b, y0, x1, c);
          const double bot = (1 - fx) * image.at(b, y1, x0, c) + fx * image.at(b, y1, x1, c);
          out.at(b, oy, ox, c) = (1 - fy) * top + fy * bot;
        }
      }
    }
  return out;
}

SegmentationMask resize_nearest(const SegmentationMask& mask, std::size_t out_h, std::size_t out_w) {
  require(out_h > 0 && out_w > 0 && mask.height > 0 && mask.width > 0, ErrorKind::Parameter,
          "resize needs positive dims");
  SegmentationMask out(out_h, out_w, mask.num_classes, mask.ignore_index, 0);
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    const std::size_t sy = std::min(oy * mask.height / out_h, mask.height - 1);
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      const std::size_t sx = std::min(ox * mask.width / out_w, mask.width - 1);
      out.at(oy, ox) = mask.at(sy, sx);
    }
  }
  return out;
}

LabeledImage resize_to_target(const LabeledImage& item, std::size_t target) {
  return {item.id, resize_bilinear(item.image, target, target), resize_nearest(item.mask, target, target)};
}

// ---------------------------------------------------------------------------
// Synthetic data

const std::vector<LabeledImage>& Dataset::split(const std::string& s) const {
  auto it = splits.find(s);
  if (it == splits.end()) fail(ErrorKind::Config, "dataset '" + name + "' has no split '" + s + "'");
  return it->second;
}

std::vector<double> default_synthetic_priors(int num_classes) {
  std::vector<double> p(static_cast<std::size_t>(num_classes));
  double total = 0.0;
  for (int c = 0; c < num_classes; ++c) total += p[static_cast<std::size_t>(c)] = 1.0 / (c + 1.5);
  for (double& v : p) v /= total;
  return p;
}

namespace {

struct ClassStyle {
  double rgb[3];
  double freq;
  double angle;
};

ClassStyle class_style(int c) {
  static const double base[][3] = {{0.45, 0.20, 0.55}, {0.90, 0.55, 0.70}, {0.25, 0.25, 0.65},
                                   {0.80, 0.75, 0.55}, {0.55, 0.80, 0.60}};
  ClassStyle s{};
  if (c < 5) {
    for (int k = 0; k < 3; ++k) s.rgb[k] = base[c][k];
  } else {
    Rng rng(derive_seed({0xc01095, static_cast<std::uint64_t>(c)}));
    std::uniform_real_distribution<double> u(0.15, 0.85);
    for (double& v : s.rgb) v = u(rng);
  }
  s.freq = 0.08 + 0.05 * (c % 5);
  s.angle = 0.6 * c;
  return s;
}

}  // namespace

LabeledImage generate_synthetic_image(const SyntheticOptions& o, std::size_t index, const std::string& split) {
  require(o.num_classes >= 2, ErrorKind::Parameter, "synthetic data needs K >= 2");
  require(o.image_size > 0 && o.cells > 0, ErrorKind::Parameter, "synthetic image size and cell count must be positive");
  require(o.ignore_fraction >= 0.0 && o.ignore_fraction < 1.0, ErrorKind::Parameter, "ignore fraction must be in [0, 1)");
  const auto priors = o.priors.empty() ? default_synthetic_priors(o.num_classes) : o.priors;
  require(priors.size() == static_cast<std::size_t>(o.num_classes), ErrorKind::Parameter, "priors length != K");

  const std::size_t S = o.image_size;
  Rng rng(derive_seed({o.seed, hash_string(split), index}));
  std::uniform_real_distribution<double> pos(0.0, static_cast<double>(S));
  std::vector<double> weights(priors.size() + 1);
  for (std::size_t c = 0; c < priors.size(); ++c) weights[c] = priors[c] * (1.0 - o.ignore_fraction);
  weights.back() = o.ignore_fraction;
  std::discrete_distribution<int> pick(weights.begin(), weights.end());

  struct Cell {
    double y, x;
    int label;
  };
  std::vector<Cell> cells(o.cells);
  for (auto& c : cells) {
    c.y = pos(rng);
    c.x = pos(rng);
    const int k = pick(rng);
    c.label = k == o.num_classes ? o.num_classes : k;
  }

  LabeledImage item;
  item.id = split + "_" + std::to_string(index);
  item.image = Tensor::image(S, S, 3);
  item.mask = SegmentationMask(S, S, o.num_classes, o.num_classes, 0);
  std::uniform_real_distribution<double> speckle(-0.04, 0.04);
  std::uniform_real_distribution<double> phase_dist(0.0, 2.0 * std::numbers::pi);
  const double phase = phase_dist(rng);
  for (std::size_t y = 0; y < S; ++y)
    for (std::size_t x = 0; x < S; ++x) {
      double best = 1e300;
      int label = 0;
      for (const auto& c : cells) {
        const double dy = c.y - static_cast<double>(y), dx = c.x - static_cast<double>(x);
        const double d = dy * dy + dx * dx;
        if (d < best) {
          best = d;
          label = c.label;
        }
      }
      item.mask.at(y, x) = label;
      double rgb[3];
      if (label == o.num_classes) {
        rgb[0] = rgb[1] = rgb[2] = 0.95;
      } else {
        const ClassStyle s = class_style(label);
        const double t = s.freq * (std::cos(s.angle) * static_cast<double>(x) + std::sin(s.angle) * static_cast<double>(y));
        const double stripe = 0.06 * std::sin(t + phase);
        for (int k = 0; k < 3; ++k) rgb[k] = s.rgb[k] + stripe;
      }
      for (std::size_t k = 0; k < 3; ++k) {
        const double v = std::clamp(rgb[k] + speckle(rng), 0.0, 1.0);
        item.image(y, x, k) = std::round(v * 255.0) / 255.0;
      }
    }
  return item;
}

Dataset generate_synthetic_dataset(const SyntheticOptions& o) {
  require(o.n >= 1, ErrorKind::Parameter, "synthetic dataset needs n >= 1");
  Dataset ds;
  ds.name = "synthetic";
  ds.num_classes = o.num_classes;
  ds.ignore_index = o.num_classes;
  for (int k = 0; k < o.num_classes; ++k) ds.class_names.push_back("class_" + std::to_string(k));
  if (o.num_classes == 5) ds.class_names = {"tumor", "stroma", "inflammatory", "necrosis", "other"};
  auto& train = ds.splits["train"];
  for (std::size_t i = 0; i < o.n; ++i) train.push_back(generate_synthetic_image(o, i, "train"));
  if (o.n_val > 0) {
    auto& val = ds.splits["val"];
    for (std::size_t i = 0; i < o.n_val; ++i) val.push_back(generate_synthetic_image(o, i, "val"));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Manifests

nlohmann::json DatasetManifest::to_json() const {
  nlohmann::json j;
  j["name"] = name;
  j["num_classes"] = num_classes;
  j["ignore_index"] = ignore_index;
  j["class_names"] = class_names;
  j["splits"] = nlohmann::json::object();
  for (const auto& [split, items] : splits) {
    auto& arr = j["splits"][split] = nlohmann::json::array();
    for (const auto& it : items) arr.push_back({{"id", it.id}, {"image", it.image}, {"mask", it.mask}});
  }
  if (!class_map.is_null()) j["class_map"] = class_map;
  if (!patching.is_null()) j["patching"] = patching;
  return j;
}

DatasetManifest DatasetManifest::from_json(const nlohmann::json& j, const std::filesystem::path& root) {
  try {
    DatasetManifest m;
    m.root = root;
    m.name = j.at("name").get<std::string>();
    m.num_classes = j.at("num_classes").get<int>();
    m.ignore_index = j.value("ignore_index", m.num_classes);
    m.class_names = j.value("class_names", std::vector<std::string>{});
    for (const auto& [split, items] : j.at("splits").items())
      for (const auto& it : items)
        m.splits[split].push_back({it.at("id").get<std::string>(), it.at("image").get<std::string>(),
                                   it.at("mask").get<std::string>()});
    if (j.contains("class_map")) m.class_map = j["class_map"];
    if (j.contains("patching")) m.patching = j["patching"];
    return m;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Config, std::string("malformed dataset manifest: ") + e.what());
  }
}

void DatasetManifest::validate_files() const {
  for (const auto& [split, items] : splits)
    for (const auto& it : items)
      for (const auto& rel : {it.image, it.mask})
        require(std::filesystem::exists(root / rel), ErrorKind::Validation,
                "manifest references missing file " + (root / rel).string());
}

DatasetManifest write_dataset(const Dataset& ds, const std::filesystem::path& dir, const nlohmann::json& class_map,
                              const nlohmann::json& patching) {
  std::filesystem::create_directories(dir);
  DatasetManifest m;
  m.root = dir;
  m.name = ds.name;
  m.num_classes = ds.num_classes;
  m.ignore_index = ds.ignore_index;
  m.class_names = ds.class_names;
  m.class_map = class_map;
  m.patching = patching;
  const auto palette = default_palette(ds.num_classes, ds.ignore_index);
  for (const auto& [split, items] : ds.splits)
    for (const auto& it : items) {
      const std::string img = "images/" + split + "/" + it.id + ".png";
      const std::string msk = "masks/" + split + "/" + it.id + ".png";
      write_png_rgb(dir / img, it.image);
      write_png_indexed(dir / msk, it.mask, palette);
      m.splits[split].push_back({it.id, img, msk});
    }
  nlohmann::json pal;
  pal["ignore_index"] = ds.ignore_index;
  for (std::size_t k = 0; k < palette.size(); ++k) {
    const bool ignore = static_cast<int>(k) == ds.ignore_index;
    const std::string name = ignore ? "dont_care" : (k < ds.class_names.size() ? ds.class_names[k] : "unused");
    pal["entries"].push_back({{"value", k}, {"name", name}, {"rgb", {palette[k][0], palette[k][1], palette[k][2]}}});
  }
  std::ofstream(dir / "palette.json") << pal.dump(2) << '\n';
  std::ofstream(dir / "manifest.json") << m.to_json().dump(2) << '\n';
  return m;
}

DatasetManifest read_manifest(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) fail(ErrorKind::Config, "dataset manifest not found: " + manifest_path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Config, "cannot parse " + manifest_path.string() + ": " + e.what());
  }
  auto m = DatasetManifest::from_json(j, manifest_path.parent_path());
  m.validate_files();
  return m;
}

Dataset load_dataset(const DatasetManifest& m) {
  Dataset ds;
  ds.name = m.name;
  ds.num_classes = m.num_classes;
  ds.ignore_index = m.ignore_index;
  ds.class_names = m.class_names;
  for (const auto& [split, items] : m.splits)
    for (const auto& it : items) {
      const LabelImage raw = read_png_labels(m.root / it.mask);
      SegmentationMask mask(raw.height, raw.width, m.num_classes, m.ignore_index, 0);
      mask.classes = raw.labels;
      mask.validate();
      Tensor image = read_png_rgb(m.root / it.image);
      require(image.h() == mask.height && image.w() == mask.width, ErrorKind::Validation,
              "image and mask sizes differ for " + it.id);
      ds.splits[split].push_back({it.id, std::move(image), std::move(mask)});
    }
  return ds;
}

// ---------------------------------------------------------------------------
// prepare-data

namespace {

std::vector<std::filesystem::path> sorted_pngs(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  if (!std::filesystem::is_directory(dir)) return files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  return files;
}

}  // namespace

DatasetManifest prepare_data(const PrepareOptions& o) {
  if (o.dataset == "synthetic") {
    return write_dataset(generate_synthetic_dataset(o.synthetic), o.out_dir);
  }
  require(o.dataset == "bcss" || o.dataset == "glas", ErrorKind::Config,
          "unknown dataset '" + o.dataset + "' (bcss | glas | synthetic)");
  require(std::filesystem::is_directory(o.raw_root), ErrorKind::Config,
          "raw dataset root not found: " + o.raw_root.string());

  ClassMap map;
  if (o.dataset == "bcss") {
    if (o.class_map_file.empty()) {
      map = bcss_default_class_map();
    } else {
      std::ifstream in(o.class_map_file);
      if (!in) fail(ErrorKind::Config, "class map not found: " + o.class_map_file.string());
      nlohmann::json j;
      in >> j;
      map = ClassMap::from_json(j);
    }
  } else {
    // Gland vs background; annotation files label each gland instance.
    map.num_classes = 2;
    map.ignore_index = 2;
    map.class_names = {"background", "gland"};
    map.strict = false;
    map.table[0] = 0;
    for (int v = 1; v < 256; ++v) map.table[v] = 1;
  }

  Dataset ds;
  ds.name = o.dataset;
  ds.num_classes = map.num_classes;
  ds.ignore_index = map.ignore_index;
  ds.class_names = map.class_names;
  for (const auto& entry : std::filesystem::directory_iterator(o.raw_root)) {
    if (!entry.is_directory()) continue;
    const std::string split = entry.path().filename().string();
    for (const auto& img_path : sorted_pngs(entry.path() / "images")) {
      const auto mask_path = entry.path() / "masks" / img_path.filename();
      if (!std::filesystem::exists(mask_path)) {
        spdlog::warn("no mask for {}; skipped", img_path.string());
        continue;
      }
      LabeledImage roi{img_path.stem().string(), read_png_rgb(img_path), remap_classes(read_png_labels(mask_path), map)};
      if (o.dataset == "bcss") {
        auto ex = extract_roi_patches(roi.id, roi.image, roi.mask, o.policy, o.seed);
        spdlog::info("{}: {} windows, {} dropped", roi.id, ex.windows, ex.dropped);
        for (auto& c : ex.crops) ds.splits[split].push_back(std::move(c));
      } else {
        ds.splits[split].push_back(resize_to_target(roi, o.target));
      }
    }
  }
  require(!ds.splits.empty(), ErrorKind::Config, "no images found under " + o.raw_root.string());
  return write_dataset(ds, o.out_dir, map.to_json(), o.dataset == "bcss" ? o.policy.to_json() : nlohmann::json());
}

}  // namespace pathseg
