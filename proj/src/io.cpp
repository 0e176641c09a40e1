#include "pmdm/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>
#include <stdexcept>

namespace pmdm {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_or_throw(const std::string& path, const char* mode) {
    FilePtr f(std::fopen(path.c_str(), mode));
    if (!f) throw std::runtime_error("cannot open " + path);
    return f;
}

void write_u32(std::FILE* f, std::uint32_t v) {
    if (std::fwrite(&v, sizeof(v), 1, f) != 1) throw std::runtime_error("write failed");
}

void write_f32(std::FILE* f, float v) {
    if (std::fwrite(&v, sizeof(v), 1, f) != 1) throw std::runtime_error("write failed");
}

std::uint32_t read_u32(std::FILE* f, const std::string& path) {
    std::uint32_t v;
    if (std::fread(&v, sizeof(v), 1, f) != 1) throw std::runtime_error("truncated file: " + path);
    return v;
}

float read_f32(std::FILE* f, const std::string& path) {
    float v;
    if (std::fread(&v, sizeof(v), 1, f) != 1) throw std::runtime_error("truncated file: " + path);
    return v;
}

void check_magic(std::FILE* f, const char* expect, const std::string& path) {
    char magic[4];
    if (std::fread(magic, 1, 4, f) != 4 || std::memcmp(magic, expect, 4) != 0)
        throw std::runtime_error(path + ": bad magic, expected " + expect);
}

}  // namespace

void save_pimg(const std::string& path, const ImageGrid& img) {
    auto f = open_or_throw(path, "wb");
    if (std::fwrite("PIMG", 1, 4, f.get()) != 4) throw std::runtime_error("write failed");
    write_u32(f.get(), 1);
    write_u32(f.get(), static_cast<std::uint32_t>(img.width));
    write_u32(f.get(), static_cast<std::uint32_t>(img.height));
    write_f32(f.get(), img.pixel_size_mm);
    if (!img.values.empty() &&
        std::fwrite(img.values.data(), sizeof(float), img.values.size(), f.get()) != img.values.size())
        throw std::runtime_error("write failed: " + path);
}

ImageGrid load_pimg(const std::string& path) {
    auto f = open_or_throw(path, "rb");
    check_magic(f.get(), "PIMG", path);
    const std::uint32_t version = read_u32(f.get(), path);
    if (version != 1) throw std::runtime_error(path + ": unsupported PIMG version");
    const int w = static_cast<int>(read_u32(f.get(), path));
    const int h = static_cast<int>(read_u32(f.get(), path));
    const float pix = read_f32(f.get(), path);
    ImageGrid img(w, h, pix);
    if (!img.values.empty() &&
        std::fread(img.values.data(), sizeof(float), img.values.size(), f.get()) != img.values.size())
        throw std::runtime_error("truncated file: " + path);
    return img;
}

void save_psin(const std::string& path, const Sinogram& sino) {
    auto f = open_or_throw(path, "wb");
    if (std::fwrite("PSIN", 1, 4, f.get()) != 4) throw std::runtime_error("write failed");
    write_u32(f.get(), 1);
    write_u32(f.get(), static_cast<std::uint32_t>(sino.n_angles));
    write_u32(f.get(), static_cast<std::uint32_t>(sino.n_bins));
    write_f32(f.get(), sino.bin_spacing_mm);
    const std::uint8_t kind = static_cast<std::uint8_t>(sino.kind);
    if (std::fwrite(&kind, 1, 1, f.get()) != 1) throw std::runtime_error("write failed");
    if (!sino.data.empty() &&
        std::fwrite(sino.data.data(), sizeof(float), sino.data.size(), f.get()) != sino.data.size())
        throw std::runtime_error("write failed: " + path);
}

Sinogram load_psin(const std::string& path) {
    auto f = open_or_throw(path, "rb");
    check_magic(f.get(), "PSIN", path);
    const std::uint32_t version = read_u32(f.get(), path);
    if (version != 1) throw std::runtime_error(path + ": unsupported PSIN version");
    const int n_angles = static_cast<int>(read_u32(f.get(), path));
    const int n_bins = static_cast<int>(read_u32(f.get(), path));
    const float spacing = read_f32(f.get(), path);
    std::uint8_t kind;
    if (std::fread(&kind, 1, 1, f.get()) != 1) throw std::runtime_error("truncated file: " + path);
    if (kind > 1) throw std::runtime_error(path + ": invalid sinogram kind flag");
    Sinogram sino(n_bins, n_angles, spacing, static_cast<Sinogram::Kind>(kind));
    if (!sino.data.empty() &&
        std::fread(sino.data.data(), sizeof(float), sino.data.size(), f.get()) != sino.data.size())
        throw std::runtime_error("truncated file: " + path);
    return sino;
}

void save_pgm(const std::string& path, const float* data, int rows, int cols, float lo, float hi) {
    auto f = open_or_throw(path, "wb");
    std::fprintf(f.get(), "P5\n%d %d\n255\n", cols, rows);
    const float span = hi > lo ? hi - lo : 1.0f;
    std::vector<unsigned char> row(static_cast<std::size_t>(cols));
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            float v = (data[static_cast<std::size_t>(r) * cols + c] - lo) / span;
            v = std::clamp(v, 0.0f, 1.0f);
            row[static_cast<std::size_t>(c)] = static_cast<unsigned char>(std::lround(v * 255.0f));
        }
        if (std::fwrite(row.data(), 1, row.size(), f.get()) != row.size())
            throw std::runtime_error("write failed: " + path);
    }
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    out << content;
    if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace pmdm
