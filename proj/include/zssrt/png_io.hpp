#pragma once

#include <filesystem>

#include "zssrt/tensor.hpp"

namespace zssrt {

// 8-bit PNG. Returned values are in [0, 1]; channel count follows the file
// (gray and palette images are expanded to RGB, alpha is kept).
Tensor3<float> read_png(const std::filesystem::path& path);

// Writes 1, 3 or 4 channel images, clamping to [0, 1] and rounding to 8 bits.
void write_png(const std::filesystem::path& path, const Tensor3<float>& img);

// Float32 map written as <stem>.bin with a <stem>.json header.
void write_float_map(const std::filesystem::path& stem, const Tensor3<float>& map);
Tensor3<float> read_float_map(const std::filesystem::path& stem);

}  // namespace zssrt
