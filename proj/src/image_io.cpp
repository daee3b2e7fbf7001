#include "pathseg/image_io.hpp"

#include <png.h>

#include <algorithm>

#include <cmath>
#include <cstdio>
#include <memory>

namespace pathseg {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

struct Decoded {
  std::size_t height = 0, width = 0, channels = 0;
  std::vector<std::uint8_t> pixels;
};

// Reads an 8-bit PNG. With keep_palette the palette indices are returned
// as a single channel instead of expanded colours.
Decoded decode(const std::filesystem::path& path, bool keep_palette) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) fail(ErrorKind::Io, "cannot open " + path.string());
  png_byte sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    fail(ErrorKind::Io, "not a PNG file: " + path.string());
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail(ErrorKind::Io, "libpng initialisation failed");
  }
  Decoded out;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail(ErrorKind::Io, "corrupt PNG: " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const auto color = png_get_color_type(png, info);
  const auto depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (depth < 8) png_set_packing(png);
  if (color == PNG_COLOR_TYPE_PALETTE && !keep_palette) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8 && !keep_palette) png_set_expand_gray_1_2_4_to_8(png);
  if (!keep_palette && png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_read_update_info(png, info);
  out.width = png_get_image_width(png, info);
  out.height = png_get_image_height(png, info);
  out.channels = png_get_channels(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  out.pixels.resize(rowbytes * out.height);
  rows.resize(out.height);
  for (std::size_t y = 0; y < out.height; ++y) rows[y] = out.pixels.data() + y * rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

void encode(const std::filesystem::path& path, std::size_t h, std::size_t w, int color_type,
            const std::vector<std::uint8_t>& pixels, std::size_t channels, const std::vector<Rgb>* palette) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) fail(ErrorKind::Io, "cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    fail(ErrorKind::Io, "libpng initialisation failed");
  }
  std::vector<png_color> pal;
  std::vector<png_bytep> rows(h);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    fail(ErrorKind::Io, "failed writing PNG " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  if (palette) {
    for (const auto& c : *palette) pal.push_back({c[0], c[1], c[2]});
    png_set_PLTE(png, info, pal.data(), static_cast<int>(pal.size()));
  }
  png_write_info(png, info);
  for (std::size_t y = 0; y < h; ++y) rows[y] = const_cast<png_bytep>(pixels.data() + y * w * channels);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

Tensor read_png_rgb(const std::filesystem::path& path) {
  const Decoded d = decode(path, false);
  Tensor img = Tensor::image(d.height, d.width, 3);
  for (std::size_t y = 0; y < d.height; ++y)
    for (std::size_t x = 0; x < d.width; ++x) {
      const std::uint8_t* px = d.pixels.data() + (y * d.width + x) * d.channels;
      for (std::size_t c = 0; c < 3; ++c) {
        const std::uint8_t v = d.channels >= 3 ? px[c] : px[0];
        img(y, x, c) = static_cast<double>(v) / 255.0;
      }
    }
  return img;
}

void write_png_rgb(const std::filesystem::path& path, const Tensor& image) {
  require(image.n() == 1 && image.c() == 3, ErrorKind::Shape, "write_png_rgb expects one RGB image");
  std::vector<std::uint8_t> px(image.h() * image.w() * 3);
  auto src = image.values();
  for (std::size_t i = 0; i < px.size(); ++i)
    px[i] = static_cast<std::uint8_t>(std::lround(std::clamp(src[i], 0.0, 1.0) * 255.0));
  encode(path, image.h(), image.w(), PNG_COLOR_TYPE_RGB, px, 3, nullptr);
}

LabelImage read_png_labels(const std::filesystem::path& path) {
  const Decoded d = decode(path, true);
  LabelImage out{d.height, d.width, std::vector<std::int32_t>(d.height * d.width)};
  for (std::size_t i = 0; i < out.labels.size(); ++i) out.labels[i] = d.pixels[i * d.channels];
  return out;
}

void write_png_indexed(const std::filesystem::path& path, const SegmentationMask& mask,
                       const std::vector<Rgb>& palette) {
  std::vector<std::uint8_t> px(mask.size());
  for (std::size_t i = 0; i < px.size(); ++i) {
    const auto v = mask.classes[i];
    require(v >= 0 && v < 256 && static_cast<std::size_t>(v) < palette.size(), ErrorKind::Parameter,
            "mask value " + std::to_string(v) + " has no palette entry");
    px[i] = static_cast<std::uint8_t>(v);
  }
  encode(path, mask.height, mask.width, PNG_COLOR_TYPE_PALETTE, px, 1, &palette);
}

std::vector<Rgb> default_palette(int num_classes, int ignore_index) {
  static const Rgb base[] = {{200, 40, 40},  {240, 160, 200}, {60, 60, 200},  {120, 80, 40},
                             {80, 180, 80},  {230, 200, 60},  {60, 200, 200}, {160, 60, 160}};
  const int n = std::max(num_classes, ignore_index + 1);
  std::vector<Rgb> pal(static_cast<std::size_t>(n), Rgb{0, 0, 0});
  for (int k = 0; k < num_classes; ++k) {
    if (k < 8) {
      pal[static_cast<std::size_t>(k)] = base[k];
    } else {
      const auto g = static_cast<std::uint8_t>((37 * k) % 256);
      pal[static_cast<std::size_t>(k)] = {g, static_cast<std::uint8_t>(255 - g), static_cast<std::uint8_t>((91 * k) % 256)};
    }
  }
  return pal;
}

}  // namespace pathseg
