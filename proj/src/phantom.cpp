#include "pmdm/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "pmdm/io.hpp"

namespace pmdm {

namespace {

constexpr double kPi = 3.14159265358979323846;

float frand(Rng& rng, float lo, float hi) {
    return lo + (hi - lo) * static_cast<float>(rng.uniform());
}

}  // namespace

PhantomSpec make_phantom_spec(std::uint64_t seed) {
    Rng rng(seed);
    PhantomSpec spec;
    spec.seed = seed;

    // Skull ring: bright outer shell with the interior knocked back down to
    // a gray-matter baseline of 0.35.
    const float out_a = frand(rng, 0.90f, 0.94f);
    const float out_b = frand(rng, 0.84f, 0.90f);
    const float tilt = frand(rng, -0.15f, 0.15f);
    spec.ring_outer = out_a;
    spec.ellipses.push_back({0.0f, 0.0f, out_a, out_b, tilt, 0.50f});
    spec.ellipses.push_back({0.0f, 0.0f, out_a * spec.ring_inner_scale,
                             out_b * spec.ring_inner_scale, tilt, -0.15f});

    // Cortex-like band just inside the skull.
    const float cor_a = out_a * frand(rng, 0.80f, 0.86f);
    const float cor_b = out_b * frand(rng, 0.80f, 0.86f);
    spec.ellipses.push_back({0.0f, 0.0f, cor_a, cor_b, tilt, 0.40f});
    spec.ellipses.push_back({0.0f, 0.0f, cor_a * 0.80f, cor_b * 0.80f, tilt, -0.40f});

    // Ventricle-like cold structures near the center.
    const int n_vent = 1 + static_cast<int>(rng.below(2));
    for (int v = 0; v < n_vent; ++v) {
        const float side = (v == 0) ? -1.0f : 1.0f;
        spec.ellipses.push_back({side * frand(rng, 0.08f, 0.18f), frand(rng, -0.12f, 0.04f),
                                 frand(rng, 0.10f, 0.20f), frand(rng, 0.06f, 0.12f),
                                 frand(rng, -0.5f, 0.5f), -frand(rng, 0.18f, 0.28f)});
    }

    // 3-8 interior structures, mostly hot.
    const int n_inner = 3 + static_cast<int>(rng.below(6));
    for (int i = 0; i < n_inner; ++i) {
        const float r = frand(rng, 0.05f, 0.55f);
        const float phi = frand(rng, 0.0f, static_cast<float>(2.0 * kPi));
        const bool hot = rng.uniform() < 0.7;
        spec.ellipses.push_back({r * std::cos(phi), r * std::sin(phi),
                                 frand(rng, 0.06f, 0.22f), frand(rng, 0.05f, 0.18f),
                                 frand(rng, 0.0f, static_cast<float>(kPi)),
                                 hot ? frand(rng, 0.15f, 0.45f) : -frand(rng, 0.10f, 0.22f)});
    }
    return spec;
}

ImageGrid rasterize_phantom(const PhantomSpec& spec, int grid_size, float pixel_size_mm) {
    if (grid_size < 16) throw std::invalid_argument("phantom grid_size must be >= 16");
    ImageGrid img(grid_size, grid_size, pixel_size_mm);
    const double c = 0.5 * (grid_size - 1);
    const double inv_r = 2.0 / grid_size;  // pixels -> normalized units

    struct EllipseGeom {
        double cx, cy, cos_r, sin_r, inv_a2, inv_b2;
        float intensity;
    };
    std::vector<EllipseGeom> geos;
    geos.reserve(spec.ellipses.size());
    for (const auto& e : spec.ellipses) {
        if (e.a <= 0.0f || e.b <= 0.0f) throw std::invalid_argument("phantom ellipse with non-positive axis");
        geos.push_back({e.cx, e.cy, std::cos(e.rot), std::sin(e.rot),
                        1.0 / (static_cast<double>(e.a) * e.a), 1.0 / (static_cast<double>(e.b) * e.b),
                        e.intensity});
    }

    static constexpr double kSub[2] = {-0.25, 0.25};
    for (int iy = 0; iy < grid_size; ++iy) {
        for (int ix = 0; ix < grid_size; ++ix) {
            double acc = 0.0;
            for (double dy : kSub) {
                for (double dx : kSub) {
                    const double u = (ix + dx - c) * inv_r;
                    const double v = (iy + dy - c) * inv_r;
                    if (u * u + v * v > 1.0) continue;  // inscribed-circle support
                    double val = 0.0;
                    for (const auto& g : geos) {
                        const double du = u - g.cx;
                        const double dv = v - g.cy;
                        const double xr = du * g.cos_r + dv * g.sin_r;
                        const double yr = -du * g.sin_r + dv * g.cos_r;
                        if (xr * xr * g.inv_a2 + yr * yr * g.inv_b2 <= 1.0) val += g.intensity;
                    }
                    acc += std::max(val, 0.0);
                }
            }
            img.at(iy, ix) = static_cast<float>(acc * 0.25);
        }
    }

    const float peak = img.max_value();
    if (peak <= 0.0f) throw std::runtime_error("phantom rasterized to all zeros");
    for (auto& v : img.values) v /= peak;
    return img;
}

ImageGrid generate_phantom(std::uint64_t seed, int grid_size) {
    return rasterize_phantom(make_phantom_spec(seed), grid_size, 2.0f);
}

ImageGrid rotate_augment(const ImageGrid& img, float angle_deg) {
    ImageGrid out(img.width, img.height, img.pixel_size_mm);
    const double phi = angle_deg * kPi / 180.0;
    const double cs = std::cos(phi), sn = std::sin(phi);
    const double cx = 0.5 * (img.width - 1);
    const double cy = 0.5 * (img.height - 1);
    for (int iy = 0; iy < img.height; ++iy) {
        for (int ix = 0; ix < img.width; ++ix) {
            // Inverse map: rotate the output coordinate back into the source.
            const double x = ix - cx;
            const double y = iy - cy;
            const double sx = cs * x + sn * y + cx;
            const double sy = -sn * x + cs * y + cy;
            const int x0 = static_cast<int>(std::floor(sx));
            const int y0 = static_cast<int>(std::floor(sy));
            const double wx = sx - x0;
            const double wy = sy - y0;
            double acc = 0.0;
            for (int dy = 0; dy <= 1; ++dy) {
                for (int dx = 0; dx <= 1; ++dx) {
                    const int xx = x0 + dx;
                    const int yy = y0 + dy;
                    if (xx < 0 || xx >= img.width || yy < 0 || yy >= img.height) continue;
                    const double w = (dx ? wx : 1.0 - wx) * (dy ? wy : 1.0 - wy);
                    acc += w * img.at(yy, xx);
                }
            }
            out.at(iy, ix) = static_cast<float>(std::max(acc, 0.0));
        }
    }
    return out;
}

std::vector<const ManifestRecord*> Manifest::in_split(const std::string& split) const {
    std::vector<const ManifestRecord*> out;
    for (const auto& r : records)
        if (r.split == split) out.push_back(&r);
    return out;
}

void save_manifest(const std::string& path, const Manifest& manifest) {
    std::ostringstream ss;
    for (const auto& r : manifest.records) {
        char angle[32];
        std::snprintf(angle, sizeof(angle), "%.6f", r.angle_deg);
        ss << r.split << '\t' << r.phantom_id << '\t' << angle << '\t' << r.image_path << '\t'
           << r.sino_path << '\n';
    }
    write_text_file(path, ss.str());
}

Manifest load_manifest(const std::string& path) {
    Manifest m;
    std::istringstream in(read_text_file(path));
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream ls(line);
        ManifestRecord r;
        std::string angle;
        std::string id;
        if (!std::getline(ls, r.split, '\t') || !std::getline(ls, id, '\t') ||
            !std::getline(ls, angle, '\t') || !std::getline(ls, r.image_path, '\t') ||
            !std::getline(ls, r.sino_path))
            throw std::runtime_error(path + ": malformed manifest line " + std::to_string(line_no));
        r.phantom_id = std::stoi(id);
        r.angle_deg = std::stof(angle);
        m.records.push_back(std::move(r));
    }
    return m;
}

std::vector<ManifestRecord> plan_dataset(const DatasetSpec& spec) {
    if (spec.n_phantoms < 1) throw std::invalid_argument("dataset needs at least one phantom");
    if (spec.augment_per_phantom < 1) throw std::invalid_argument("augment_per_phantom must be >= 1");
    if (spec.n_train + spec.n_val + spec.n_test != spec.n_phantoms)
        throw std::invalid_argument("split sizes must sum to n_phantoms");
    if (spec.angle_lo_deg > spec.angle_hi_deg)
        throw std::invalid_argument("angle range is inverted");

    const Rng base(spec.seed);
    const Rng angles = base.split("augment-angles");
    std::vector<ManifestRecord> plan;
    plan.reserve(static_cast<std::size_t>(spec.n_phantoms) * spec.augment_per_phantom);
    for (int p = 0; p < spec.n_phantoms; ++p) {
        const char* split = p < spec.n_train            ? "train"
                            : p < spec.n_train + spec.n_val ? "val"
                                                            : "test";
        for (int k = 0; k < spec.augment_per_phantom; ++k) {
            Rng draw = angles.split_index(static_cast<std::uint64_t>(p)).split_index(static_cast<std::uint64_t>(k));
            ManifestRecord r;
            r.split = split;
            r.phantom_id = p;
            r.angle_deg = frand(draw, spec.angle_lo_deg, spec.angle_hi_deg);
            char buf[64];
            std::snprintf(buf, sizeof(buf), "phantoms/phantom_%03d_a%02d.pimg", p, k);
            r.image_path = buf;
            r.sino_path = "-";
            plan.push_back(std::move(r));
        }
    }
    return plan;
}

ImageGrid render_sample(const DatasetSpec& spec, const ManifestRecord& rec) {
    Rng seeder = Rng(spec.seed).split("phantom").split_index(static_cast<std::uint64_t>(rec.phantom_id));
    const ImageGrid base = rasterize_phantom(make_phantom_spec(seeder.next_u64()), spec.grid_size,
                                             spec.pixel_size_mm);
    if (rec.angle_deg == 0.0f) return base;
    return rotate_augment(base, rec.angle_deg);
}

Manifest build_dataset(const DatasetSpec& spec, const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(out_dir) / "phantoms");
    Manifest manifest;
    manifest.records = plan_dataset(spec);
    for (const auto& rec : manifest.records) {
        const ImageGrid img = render_sample(spec, rec);
        save_pimg((fs::path(out_dir) / rec.image_path).string(), img);
    }
    save_manifest((fs::path(out_dir) / "manifest.tsv").string(), manifest);
    return manifest;
}

}  // namespace pmdm
