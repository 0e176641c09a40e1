#pragma once

#include <string>

#include "pmdm/image.hpp"

namespace pmdm {

/// Image container: magic "PIMG", u32 version, u32 width, u32 height,
/// f32 pixel_size_mm, little-endian float32 row-major payload.
void save_pimg(const std::string& path, const ImageGrid& img);
ImageGrid load_pimg(const std::string& path);

/// Sinogram container: magic "PSIN", u32 version, u32 n_angles, u32 n_bins,
/// f32 bin_spacing_mm, u8 kind (0 expected / 1 counts), float32 payload
/// (bin-major: data[bin * n_angles + angle]).
void save_psin(const std::string& path, const Sinogram& sino);
Sinogram load_psin(const std::string& path);

/// 8-bit binary portable graymap preview; rows x cols values mapped linearly
/// from [lo, hi] to [0, 255].
void save_pgm(const std::string& path, const float* data, int rows, int cols, float lo, float hi);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);

}  // namespace pmdm
