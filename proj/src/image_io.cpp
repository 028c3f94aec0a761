#include "fsda/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <vector>

namespace fsda {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

struct RawPng {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;
};

RawPng read_png(const std::string& path) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw Error("cannot open " + path);
  png_byte header[8];
  if (std::fread(header, 1, 8, file.get()) != 8 || png_sig_cmp(header, 0, 8) != 0) {
    throw Error(path + " is not a PNG file");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("libpng initialisation failed");
  }
  RawPng raw;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("failed to decode " + path);
  }
  png_init_io(png, file.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  const int bit_depth = png_get_bit_depth(png, info);
  const int color_type = png_get_color_type(png, info);
  if (bit_depth == 16) png_set_strip_16(png);
  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  png_read_update_info(png, info);

  raw.width = static_cast<int>(png_get_image_width(png, info));
  raw.height = static_cast<int>(png_get_image_height(png, info));
  raw.channels = png_get_channels(png, info);
  raw.pixels.resize(static_cast<std::size_t>(raw.width) * raw.height * raw.channels);
  rows.resize(raw.height);
  for (int y = 0; y < raw.height; ++y) {
    rows[y] = raw.pixels.data() + static_cast<std::size_t>(y) * raw.width * raw.channels;
  }
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return raw;
}

void write_png(const std::string& path, int width, int height, int channels,
               const std::vector<std::uint8_t>& pixels) {
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw Error("cannot create " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw Error("libpng initialisation failed");
  }
  std::vector<png_bytep> rows(height);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("failed to encode " + path);
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, width, height, 8,
               channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < height; ++y) {
    rows[y] = const_cast<png_bytep>(pixels.data() + static_cast<std::size_t>(y) * width * channels);
  }
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

void validate_mask(const LabelMask& mask, int n_class) {
  for (std::uint8_t v : mask.data) {
    if (v != kIgnoreLabel && v >= n_class) {
      throw Error("mask value " + std::to_string(v) + " outside schema with " +
                  std::to_string(n_class) + " classes");
    }
  }
}

LabelMask load_mask(const std::string& path, std::optional<int> n_class) {
  RawPng raw = read_png(path);
  if (raw.channels != 1) {
    throw Error(path + ": mask must be single-channel, found " + std::to_string(raw.channels));
  }
  LabelMask mask(raw.height, raw.width);
  mask.data = std::move(raw.pixels);
  if (n_class) validate_mask(mask, *n_class);
  return mask;
}

void save_mask(const std::string& path, const LabelMask& mask) {
  write_png(path, mask.width, mask.height, 1, mask.data);
}

ImageTensor load_image(const std::string& path) {
  RawPng raw = read_png(path);
  if (raw.channels != 3 && raw.channels != 4) {
    throw Error(path + ": image must be RGB, found " + std::to_string(raw.channels) + " channels");
  }
  ImageTensor image(raw.height, raw.width, 3);
  for (std::size_t i = 0; i < image.pixels(); ++i) {
    for (int c = 0; c < 3; ++c) image.data[i * 3 + c] = raw.pixels[i * raw.channels + c] / 255.0;
  }
  return image;
}

void save_image(const std::string& path, const ImageTensor& image) {
  if (image.channels != 3) throw Error("save_image expects 3 channels");
  std::vector<std::uint8_t> bytes(image.data.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    bytes[i] = static_cast<std::uint8_t>(std::lround(std::clamp(image.data[i], 0.0, 1.0) * 255.0));
  }
  write_png(path, image.width, image.height, 3, bytes);
}

void save_color_mask(const std::string& path, const LabelMask& mask) {
  std::vector<std::uint8_t> bytes(mask.pixels() * 3);
  for (std::size_t i = 0; i < mask.pixels(); ++i) {
    const std::uint8_t v = mask.data[i];
    std::uint8_t rgb[3] = {0, 0, 0};
    if (v != kIgnoreLabel) {
      // Spread class ids over the colour cube with bit interleaving.
      unsigned id = v + 1;
      for (int bit = 0; bit < 8; ++bit) {
        rgb[0] |= static_cast<std::uint8_t>(((id >> 0) & 1) << (7 - bit));
        rgb[1] |= static_cast<std::uint8_t>(((id >> 1) & 1) << (7 - bit));
        rgb[2] |= static_cast<std::uint8_t>(((id >> 2) & 1) << (7 - bit));
        id >>= 3;
      }
    }
    std::copy(rgb, rgb + 3, bytes.begin() + static_cast<std::ptrdiff_t>(i) * 3);
  }
  write_png(path, mask.width, mask.height, 3, bytes);
}

}  // namespace fsda
