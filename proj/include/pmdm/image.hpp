#pragma once

#include <cstdint>
#include <vector>

namespace pmdm {

/// 2D scalar field (activity image, phantom, or reconstruction) with a
/// physical pixel size. Row-major, values[y * width + x].
struct ImageGrid {
    int width = 0;
    int height = 0;
    float pixel_size_mm = 1.0f;
    std::vector<float> values;

    ImageGrid() = default;
    ImageGrid(int w, int h, float pixel_size)
        : width(w), height(h), pixel_size_mm(pixel_size),
          values(static_cast<std::size_t>(w) * static_cast<std::size_t>(h), 0.0f) {}

    float& at(int y, int x) { return values[static_cast<std::size_t>(y) * width + x]; }
    float at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
    std::size_t size() const { return values.size(); }

    double sum() const;
    float max_value() const;
    float min_value() const;
};

/// Projection-domain data: rows are detector bins, columns are view angles,
/// data[bin * n_angles + angle].
struct Sinogram {
    enum class Kind : std::uint8_t { Expected = 0, Counts = 1 };

    int n_bins = 0;
    int n_angles = 0;
    float bin_spacing_mm = 1.0f;
    Kind kind = Kind::Expected;
    std::vector<float> data;

    Sinogram() = default;
    Sinogram(int bins, int angles, float spacing, Kind k)
        : n_bins(bins), n_angles(angles), bin_spacing_mm(spacing), kind(k),
          data(static_cast<std::size_t>(bins) * static_cast<std::size_t>(angles), 0.0f) {}

    float& at(int bin, int angle) { return data[static_cast<std::size_t>(bin) * n_angles + angle]; }
    float at(int bin, int angle) const { return data[static_cast<std::size_t>(bin) * n_angles + angle]; }
    std::size_t size() const { return data.size(); }

    double sum() const;
    float max_value() const;
};

/// Zero-pads a rows x cols array to target x target, centered; offsets are
/// floor((target - extent) / 2). Throws if target is smaller than either extent.
std::vector<float> pad_to_square(const std::vector<float>& src, int rows, int cols, int target);
/// Exact inverse of pad_to_square.
std::vector<float> crop_from_square(const std::vector<float>& padded, int rows, int cols, int target);

}  // namespace pmdm
