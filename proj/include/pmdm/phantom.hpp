#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pmdm/image.hpp"
#include "pmdm/tensor.hpp"

namespace pmdm {

/// Ellipse-composite description of one synthetic brain-like slice.
/// Coordinates are normalized to the inscribed circle: (0,0) is the image
/// center, radius 1 touches the nearest edge.
struct PhantomSpec {
    struct Ellipse {
        float cx, cy;       // center
        float a, b;         // semi-axes
        float rot;          // radians
        float intensity;    // additive, may be negative for holes
    };
    std::vector<Ellipse> ellipses;
    float ring_outer = 0.92f;  // skull ring geometry
    float ring_inner_scale = 0.93f;
    std::uint64_t seed = 0;
};

/// Deterministic spec for a given seed: skull ring, cortex band, ventricles,
/// and 3-8 interior structures with randomized geometry and contrast.
PhantomSpec make_phantom_spec(std::uint64_t seed);

/// Rasterizes a spec at grid_size x grid_size with 2x2 supersampling.
/// Values are clamped to >= 0, zero outside the inscribed circle, and the
/// maximum is normalized to exactly 1.0.
ImageGrid rasterize_phantom(const PhantomSpec& spec, int grid_size, float pixel_size_mm);

/// make_phantom_spec + rasterize_phantom with the default 2 mm pixels.
ImageGrid generate_phantom(std::uint64_t seed, int grid_size);

/// Bilinear rotation about the image center, degrees counter-clockwise.
/// Out-of-support pixels are 0 and the output is clamped to >= 0.
ImageGrid rotate_augment(const ImageGrid& img, float angle_deg);

struct ManifestRecord {
    std::string split;  // train | val | test
    int phantom_id = 0;
    float angle_deg = 0.0f;
    std::string image_path;
    std::string sino_path;  // "-" when absent
};

struct Manifest {
    std::vector<ManifestRecord> records;
    std::vector<const ManifestRecord*> in_split(const std::string& split) const;
};

/// One record per line: split<TAB>phantom_id<TAB>angle<TAB>image_path<TAB>sino_path
void save_manifest(const std::string& path, const Manifest& manifest);
Manifest load_manifest(const std::string& path);

struct DatasetSpec {
    int n_phantoms = 20;
    int augment_per_phantom = 5;
    int grid_size = 32;
    float pixel_size_mm = 2.0f;
    std::uint64_t seed = 1;
    float angle_lo_deg = 0.0f;
    float angle_hi_deg = 15.0f;
    int n_train = 17;
    int n_val = 1;
    int n_test = 2;
};

/// The deterministic sample plan: split assignment is by phantom identity
/// (never by slice), augmentation angles are drawn per (phantom, index).
std::vector<ManifestRecord> plan_dataset(const DatasetSpec& spec);

/// Renders the rotated phantom for one planned record.
ImageGrid render_sample(const DatasetSpec& spec, const ManifestRecord& rec);

/// Writes every rotated phantom image plus the manifest into out_dir.
/// Paths in the manifest are relative to out_dir.
Manifest build_dataset(const DatasetSpec& spec, const std::string& out_dir);

}  // namespace pmdm
