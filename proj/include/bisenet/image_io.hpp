#pragma once

// Binary PGM (P5) / PPM (P6) reading and writing.

#include <filesystem>

#include "bisenet/tensor.hpp"

namespace bisenet::image {

/// (1, 1, h, w) for P5, (1, 3, h, w) for P6; samples scaled to [0, 1].
/// 8- and 16-bit maxvals are accepted.
Tensor<float> read_pnm(const std::filesystem::path& path);

/// 8-bit P5 for one channel, P6 for three; values clamped to [0, 1].
void write_pnm(const std::filesystem::path& path, const Tensor<float>& image);

/// P5 with gray level = class index; labels must lie in [0, 255].
void write_label_pgm(const std::filesystem::path& path, const LabelMap& labels);
LabelMap read_label_pgm(const std::filesystem::path& path);

}  // namespace bisenet::image
