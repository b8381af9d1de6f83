#pragma once

#include <filesystem>
#include <vector>

#include "sphere/tensor.hpp"

namespace sphere {

// Decode a PNG into [H, W, 3] floats in [-1, 1]. Grayscale and alpha inputs
// are expanded/flattened to RGB. Throws IoError on unreadable files.
TensorData<float> read_png(const std::filesystem::path& path);

// Encode [H, W, C] floats in [-1, 1] (C = 1 or 3) as an 8-bit PNG.
void write_png(const std::filesystem::path& path, const TensorData<float>& image);

// Tile a batch [N, H, W, C] into a grid PNG with `cols` images per row.
void write_png_grid(const std::filesystem::path& path, const TensorData<float>& batch, int cols);

// Bilinear resize of [H, W, C] to [out_h, out_w, C].
TensorData<float> resize_bilinear(const TensorData<float>& image, int64_t out_h, int64_t out_w);

// Crop the centered largest square of [H, W, C].
TensorData<float> center_crop_square(const TensorData<float>& image);

}  // namespace sphere
