#pragma once

#include <filesystem>

#include "booknet/tensor.hpp"

namespace booknet::image {

/// Reads an 8-bit or 16-bit PNG as [3 x H x W] in [0, 1]. Gray inputs are
/// replicated, alpha is dropped.
Tensor read_png(const std::filesystem::path& path);
/// Writes [3 x H x W] as 8-bit RGB or [1 x H x W] as 8-bit gray; values are
/// clamped to [0, 1] and rounded.
void write_png(const std::filesystem::path& path, const Tensor& img);

/// 0.299 R + 0.587 G + 0.114 B; returns [H x W]. [1 x H x W] passes through.
Tensor to_gray(const Tensor& rgb);

/// Rounds to the 8-bit grid, as a PNG round trip would.
Tensor quantize8(const Tensor& img);

}  // namespace booknet::image
