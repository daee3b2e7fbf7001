#include "pathseg/features.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include "json.hpp"

#include "pathseg/nn.hpp"
#include "pathseg/random.hpp"

namespace pathseg {

Tensor FeatureMap::block(const std::string& id) const {
  for (const auto& [name, range] : block_slices)
    if (name == id) return values.channel_slice(range.begin, range.end);
  fail(ErrorKind::Parameter, "feature map has no block '" + id + "'");
}

bool FeatureMap::slices_consistent() const {
  std::size_t next = 0;
  for (const auto& [name, range] : block_slices) {
    if (range.begin != next || range.end <= range.begin) return false;
    next = range.end;
  }
  return next == values.c();
}

Tensor bilinear_upsample(const BlockActivation& a, std::size_t H, std::size_t W) {
  return nn::bilinear_resize(a.values, H, W);
}

std::vector<std::size_t> resolve_block_selection(const BackboneDescriptor& d, const std::vector<std::string>& ids) {
  require(!ids.empty(), ErrorKind::Parameter, "block selection is empty");
  std::vector<bool> chosen(d.block_ids.size(), false);
  for (const auto& id : ids) {
    if (id == "all") {
      std::fill(chosen.begin(), chosen.end(), true);
      continue;
    }
    chosen[d.block_index(id)] = true;
  }
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < chosen.size(); ++i)
    if (chosen[i]) out.push_back(i);
  return out;
}

std::uint64_t patch_noise_seed(std::uint64_t run_seed, std::uint64_t image_id, std::size_t patch_index) {
  return derive_seed({run_seed, image_id, static_cast<std::uint64_t>(patch_index)});
}

FeatureMap extract_features(const Backbone& backbone, const NoiseSchedule& schedule, const Tensor& patch,
                            const FeatureOptions& options) {
  const auto& d = backbone.descriptor();
  const auto selection = resolve_block_selection(d, options.blocks);
  if (options.timestep < 0 || options.timestep > schedule.num_steps()) {
    fail(ErrorKind::Timestep, "timestep " + std::to_string(options.timestep) + " outside [0, " +
                                  std::to_string(schedule.num_steps()) + "]");
  }
  require(patch.n() == 1 && patch.h() == d.patch_size && patch.w() == d.patch_size && patch.c() == 3,
          ErrorKind::Shape,
          "patch must be " + std::to_string(d.patch_size) + "x" + std::to_string(d.patch_size) + "x3, got " +
              patch.shape_string());
  const std::size_t target = options.feature_size == 0 ? d.patch_size : options.feature_size;

  const ConditioningVector y = backbone.encode_condition(patch);
  const Latent z0 = backbone.encode_image(patch);
  const Latent zt = options.timestep == 0 ? z0 : noise_latent(z0, options.timestep, schedule, options.seed);
  const auto activations = backbone.run_unet_with_taps(zt, y);

  std::vector<Tensor> parts;
  FeatureMap fm;
  fm.timestep = options.timestep;
  std::size_t offset = 0;
  for (std::size_t idx : selection) {
    const auto& a = activations[idx];
    parts.push_back(bilinear_upsample(a, target, target));
    fm.block_slices.push_back({a.block_id, {offset, offset + a.values.c()}});
    offset += a.values.c();
  }
  fm.values = concat_channels(parts);
  return fm;
}

// ---------------------------------------------------------------------------
// Cache

namespace {

static_assert(std::endian::native == std::endian::little, "feature records are written in host byte order");

constexpr char kFeatMagic[8] = {'P', 'S', 'D', 'F', 'E', 'A', 'T', '1'};

template <class T>
void put_raw(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get_raw(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) fail(ErrorKind::Load, "truncated feature record");
  return v;
}

std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xf];
  return s;
}

}  // namespace

void write_feature_record(const std::filesystem::path& path, const FeatureMap& fm, std::uint64_t descriptor_hash,
                          std::uint64_t seed) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail(ErrorKind::Io, "cannot write " + path.string());
  os.write(kFeatMagic, 8);
  put_raw<std::uint64_t>(os, descriptor_hash);
  put_raw<std::uint64_t>(os, seed);
  put_raw<std::int32_t>(os, fm.timestep);
  put_raw<std::uint32_t>(os, static_cast<std::uint32_t>(fm.values.h()));
  put_raw<std::uint32_t>(os, static_cast<std::uint32_t>(fm.values.w()));
  put_raw<std::uint32_t>(os, static_cast<std::uint32_t>(fm.values.c()));
  put_raw<std::uint32_t>(os, static_cast<std::uint32_t>(fm.block_slices.size()));
  for (const auto& [name, range] : fm.block_slices) {
    put_raw<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_raw<std::uint32_t>(os, static_cast<std::uint32_t>(range.begin));
    put_raw<std::uint32_t>(os, static_cast<std::uint32_t>(range.end));
  }
  put_raw<std::uint8_t>(os, fm.patch_position ? 1 : 0);
  put_raw<std::uint32_t>(os, static_cast<std::uint32_t>(fm.patch_position ? fm.patch_position->row : 0));
  put_raw<std::uint32_t>(os, static_cast<std::uint32_t>(fm.patch_position ? fm.patch_position->col : 0));
  os.write(reinterpret_cast<const char*>(fm.values.values().data()),
           static_cast<std::streamsize>(fm.values.size() * sizeof(double)));
  if (!os) fail(ErrorKind::Io, "failed writing " + path.string());
}

FeatureMap read_feature_record(const std::filesystem::path& path, std::uint64_t* descriptor_hash, std::uint64_t* seed) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::Load, "feature record not found: " + path.string());
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kFeatMagic, 8) != 0) fail(ErrorKind::Load, "bad feature record magic: " + path.string());
  const auto dh = get_raw<std::uint64_t>(is);
  const auto sd = get_raw<std::uint64_t>(is);
  FeatureMap fm;
  fm.timestep = get_raw<std::int32_t>(is);
  const auto h = get_raw<std::uint32_t>(is), w = get_raw<std::uint32_t>(is), c = get_raw<std::uint32_t>(is);
  const auto blocks = get_raw<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < blocks; ++i) {
    const auto len = get_raw<std::uint32_t>(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    const auto b = get_raw<std::uint32_t>(is), e = get_raw<std::uint32_t>(is);
    fm.block_slices.push_back({name, {b, e}});
  }
  const auto has_pos = get_raw<std::uint8_t>(is);
  const auto row = get_raw<std::uint32_t>(is), col = get_raw<std::uint32_t>(is);
  if (has_pos) fm.patch_position = GridPosition{row, col};
  fm.values = Tensor(1, h, w, c);
  is.read(reinterpret_cast<char*>(fm.values.values().data()),
          static_cast<std::streamsize>(fm.values.size() * sizeof(double)));
  if (!is) fail(ErrorKind::Load, "truncated feature payload: " + path.string());
  if (!fm.slices_consistent()) fail(ErrorKind::Load, "inconsistent block slices in " + path.string());
  if (descriptor_hash) *descriptor_hash = dh;
  if (seed) *seed = sd;
  return fm;
}

FeatureCache::FeatureCache(std::filesystem::path dir) : dir_(std::move(dir)) {
  std::filesystem::create_directories(dir_);
}

std::string FeatureCache::make_key(const Tensor& patch, const Backbone& backbone, const FeatureOptions& options) {
  Fnv1a h;
  h.update(patch.values());
  const std::uint64_t image_hash = h.digest();
  Fnv1a blocks;
  for (auto idx : resolve_block_selection(backbone.descriptor(), options.blocks))
    blocks.update(backbone.descriptor().block_ids[idx]);
  Fnv1a key;
  key.update_value(image_hash);
  key.update_value(options.timestep);
  key.update_value(options.seed);
  key.update_value(blocks.digest());
  key.update_value(options.feature_size);
  key.update_value(backbone.descriptor().hash());
  key.update_value(backbone.weight_hash());
  key.update(backbone.conditioning());
  return hex64(key.digest());
}

std::optional<FeatureMap> FeatureCache::get(const std::string& key) const {
  const auto path = dir_ / (key + ".feat");
  if (!std::filesystem::exists(path)) return std::nullopt;
  return read_feature_record(path);
}

void FeatureCache::put(const std::string& key, const FeatureMap& fm, std::uint64_t descriptor_hash,
                       std::uint64_t seed) const {
  const auto final_path = dir_ / (key + ".feat");
  const auto tmp = dir_ / (key + ".feat.tmp" + hex64(derive_seed({seed, descriptor_hash, 0x7e3b})));
  write_feature_record(tmp, fm, descriptor_hash, seed);
  std::filesystem::rename(tmp, final_path);

  nlohmann::json manifest;
  manifest["key"] = key;
  manifest["format"] = "PSDFEAT1";
  manifest["descriptor_hash"] = hex64(descriptor_hash);
  manifest["seed"] = seed;
  manifest["timestep"] = fm.timestep;
  manifest["shape"] = {fm.values.h(), fm.values.w(), fm.values.c()};
  manifest["dtype"] = "float64-le";
  for (const auto& [name, range] : fm.block_slices) manifest["block_slices"][name] = {range.begin, range.end};
  if (fm.patch_position) manifest["patch_position"] = {fm.patch_position->row, fm.patch_position->col};
  std::ofstream(dir_ / (key + ".json")) << manifest.dump(2) << '\n';
}

}  // namespace pathseg
