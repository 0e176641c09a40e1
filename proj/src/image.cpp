#include "pmdm/image.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace pmdm {

double ImageGrid::sum() const {
    double acc = 0.0;
    for (float v : values) acc += v;
    return acc;
}

float ImageGrid::max_value() const {
    return values.empty() ? 0.0f : *std::max_element(values.begin(), values.end());
}

float ImageGrid::min_value() const {
    return values.empty() ? 0.0f : *std::min_element(values.begin(), values.end());
}

double Sinogram::sum() const {
    double acc = 0.0;
    for (float v : data) acc += v;
    return acc;
}

float Sinogram::max_value() const {
    return data.empty() ? 0.0f : *std::max_element(data.begin(), data.end());
}

std::vector<float> pad_to_square(const std::vector<float>& src, int rows, int cols, int target) {
    if (static_cast<std::size_t>(rows) * cols != src.size())
        throw std::invalid_argument("pad_to_square: extents do not match data length");
    if (target < rows || target < cols)
        throw std::invalid_argument("pad_to_square: target " + std::to_string(target) +
                                    " smaller than input " + std::to_string(rows) + "x" +
                                    std::to_string(cols));
    const int off_r = (target - rows) / 2;
    const int off_c = (target - cols) / 2;
    std::vector<float> out(static_cast<std::size_t>(target) * target, 0.0f);
    for (int r = 0; r < rows; ++r)
        std::copy_n(src.begin() + static_cast<std::size_t>(r) * cols, cols,
                    out.begin() + static_cast<std::size_t>(r + off_r) * target + off_c);
    return out;
}

std::vector<float> crop_from_square(const std::vector<float>& padded, int rows, int cols, int target) {
    if (static_cast<std::size_t>(target) * target != padded.size())
        throw std::invalid_argument("crop_from_square: padded data is not target x target");
    if (target < rows || target < cols)
        throw std::invalid_argument("crop_from_square: target smaller than output extents");
    const int off_r = (target - rows) / 2;
    const int off_c = (target - cols) / 2;
    std::vector<float> out(static_cast<std::size_t>(rows) * cols);
    for (int r = 0; r < rows; ++r)
        std::copy_n(padded.begin() + static_cast<std::size_t>(r + off_r) * target + off_c, cols,
                    out.begin() + static_cast<std::size_t>(r) * cols);
    return out;
}

}  // namespace pmdm
