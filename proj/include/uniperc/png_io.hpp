#pragma once

#include <filesystem>

#include "uniperc/tensor.hpp"

namespace uniperc::png {

// 8-bit grayscale PNG. Values are clamped to [0,1] and quantized on write.
void write_gray(const std::filesystem::path& path, const Tensor& img);  // {1,H,W}
Tensor read_gray(const std::filesystem::path& path);                    // -> {1,H,W} in [0,1]

}  // namespace uniperc::png
