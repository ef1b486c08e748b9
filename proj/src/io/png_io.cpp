#include "zssrt/png_io.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <vector>

#include "json.hpp"

namespace zssrt {
namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

unsigned char to_byte(float v) {
  const float c = std::min(1.0f, std::max(0.0f, v));
  return static_cast<unsigned char>(std::lround(c * 255.0f));
}

}  // namespace

Tensor3<float> read_png(const std::filesystem::path& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw IoError("cannot open image: " + path.string());

  unsigned char sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8))
    throw IoError("not a PNG file: " + path.string());

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng initialization failed");
  }
  std::vector<png_bytep> rows;
  std::vector<unsigned char> buffer;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("corrupt PNG: " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  const int color_type = png_get_color_type(png, info);
  const int bit_depth = png_get_bit_depth(png, info);
  if (bit_depth == 16) png_set_strip_16(png);
  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color_type == PNG_COLOR_TYPE_GRAY || color_type == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(png);
  png_read_update_info(png, info);

  const int width = static_cast<int>(png_get_image_width(png, info));
  const int height = static_cast<int>(png_get_image_height(png, info));
  const int channels = png_get_channels(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  buffer.resize(stride * height);
  rows.resize(height);
  for (int y = 0; y < height; ++y) rows[y] = buffer.data() + stride * y;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);

  Tensor3<float> out(height, width, channels);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < channels; ++c)
        out.at(y, x, c) = rows[y][x * channels + c] / 255.0f;
  return out;
}

void write_png(const std::filesystem::path& path, const Tensor3<float>& img) {
  int color_type;
  switch (img.channels) {
    case 1: color_type = PNG_COLOR_TYPE_GRAY; break;
    case 3: color_type = PNG_COLOR_TYPE_RGB; break;
    case 4: color_type = PNG_COLOR_TYPE_RGB_ALPHA; break;
    default: throw ShapeError("write_png: unsupported channel count " + img.shape_string());
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw IoError("cannot write image: " + path.string());

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng initialization failed");
  }
  std::vector<unsigned char> buffer(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) buffer[i] = to_byte(img.data[i]);
  std::vector<png_bytep> rows(img.height);
  for (int y = 0; y < img.height; ++y)
    rows[y] = buffer.data() + std::size_t(y) * img.width * img.channels;

  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("failed writing PNG: " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, img.width, img.height, 8, color_type, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

void write_float_map(const std::filesystem::path& stem, const Tensor3<float>& map) {
  if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
  nlohmann::json header = {{"dtype", "float32"},
                           {"endianness", "little"},
                           {"height", map.height},
                           {"width", map.width},
                           {"channels", map.channels},
                           {"data", stem.filename().string() + ".bin"}};
  std::ofstream hj(stem.string() + ".json");
  if (!hj) throw IoError("cannot write " + stem.string() + ".json");
  hj << header.dump(2) << "\n";
  std::ofstream bin(stem.string() + ".bin", std::ios::binary);
  if (!bin) throw IoError("cannot write " + stem.string() + ".bin");
  bin.write(reinterpret_cast<const char*>(map.data.data()),
            static_cast<std::streamsize>(map.size() * sizeof(float)));
}

Tensor3<float> read_float_map(const std::filesystem::path& stem) {
  std::ifstream hj(stem.string() + ".json");
  if (!hj) throw IoError("cannot open " + stem.string() + ".json");
  const auto header = nlohmann::json::parse(hj);
  Tensor3<float> out(header.at("height"), header.at("width"), header.at("channels"));
  std::ifstream bin(stem.string() + ".bin", std::ios::binary);
  if (!bin) throw IoError("cannot open " + stem.string() + ".bin");
  bin.read(reinterpret_cast<char*>(out.data.data()),
           static_cast<std::streamsize>(out.size() * sizeof(float)));
  if (!bin) throw IoError("truncated float map " + stem.string() + ".bin");
  return out;
}

}  // namespace zssrt
