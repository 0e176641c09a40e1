#include "pmdm/classical.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace pmdm {

namespace {

constexpr double kPi = 3.14159265358979323846;

std::vector<int> subset_angles(int n_angles, int subsets, int k) {
    std::vector<int> idx;
    idx.reserve(static_cast<std::size_t>(n_angles / subsets));
    for (int a = k; a < n_angles; a += subsets) idx.push_back(a);
    return idx;
}

}  // namespace

void ReconConfig::validate(int n_angles) const {
    if (iterations < 1) throw std::invalid_argument("recon iterations must be >= 1");
    if (method == Method::Osem) {
        if (subsets < 1) throw std::invalid_argument("subsets must be >= 1");
        if (n_angles % subsets != 0)
            throw std::invalid_argument("subsets (" + std::to_string(subsets) +
                                        ") must divide n_angles (" + std::to_string(n_angles) + ")");
    }
    if (init_value <= 0.0f) throw std::invalid_argument("recon init value must be > 0");
}

ImageGrid fbp(const Sinogram& sino, const SystemModel& sys, int image_size) {
    if (sys.n_angles < 2) throw std::invalid_argument("fbp needs at least 2 angles");
    if (sino.n_bins != sys.n_bins || sino.n_angles != sys.n_angles)
        throw std::invalid_argument("fbp: sinogram shape does not match system model");

    // Band-limited ramp in the spatial domain: h[0] = 1/4, h[odd n] =
    // -1/(pi^2 n^2), h[even] = 0, in bin-width units. The bin-width factors
    // cancel against the back-projection sampling density.
    const int nb = sys.n_bins;
    std::vector<double> ramp(static_cast<std::size_t>(nb), 0.0);
    ramp[0] = 0.25;
    for (int k = 1; k < nb; k += 2) ramp[static_cast<std::size_t>(k)] = -1.0 / (kPi * kPi * k * k);

    Sinogram filtered(sino.n_bins, sino.n_angles, sino.bin_spacing_mm, Sinogram::Kind::Expected);
    for (int a = 0; a < sino.n_angles; ++a) {
        for (int b = 0; b < nb; ++b) {
            double acc = 0.0;
            for (int bb = 0; bb < nb; ++bb) {
                const int lag = b >= bb ? b - bb : bb - b;
                acc += ramp[static_cast<std::size_t>(lag)] * sino.at(bb, a);
            }
            filtered.at(b, a) = static_cast<float>(acc);
        }
    }

    ImageGrid img = back_project(filtered, sys, image_size);
    const float scale = static_cast<float>(kPi / sys.n_angles);
    for (auto& v : img.values) v = std::max(v * scale, 0.0f);
    return img;
}

ImageGrid mlem(const Sinogram& counts, const SystemModel& sys, int image_size, int iterations) {
    return osem(counts, sys, image_size, iterations, 1);
}

ImageGrid osem(const Sinogram& counts, const SystemModel& sys, int image_size, int iterations,
               int subsets) {
    ReconConfig cfg;
    cfg.method = subsets == 1 ? ReconConfig::Method::Mlem : ReconConfig::Method::Osem;
    cfg.iterations = iterations;
    cfg.subsets = subsets;
    if (subsets < 1 || sys.n_angles % subsets != 0)
        throw std::invalid_argument("osem: subsets must divide n_angles");
    if (iterations < 1) throw std::invalid_argument("osem: iterations must be >= 1");
    if (counts.n_bins != sys.n_bins || counts.n_angles != sys.n_angles)
        throw std::invalid_argument("osem: sinogram shape does not match system model");
    for (float v : counts.data)
        if (v < 0.0f) throw std::invalid_argument("osem: negative counts");

    const int n = image_size;
    // Per-subset sensitivity A_S^T 1 and the full-model support mask.
    std::vector<ImageGrid> sens(static_cast<std::size_t>(subsets));
    ImageGrid full_sens(n, n, sys.pixel_size_mm);
    Sinogram ones(sys.n_bins, sys.n_angles, sys.bin_spacing_mm, Sinogram::Kind::Expected);
    std::fill(ones.data.begin(), ones.data.end(), 1.0f);
    for (int k = 0; k < subsets; ++k) {
        const auto idx = subset_angles(sys.n_angles, subsets, k);
        sens[static_cast<std::size_t>(k)] = back_project_subset(ones, sys, n, idx);
        for (std::size_t i = 0; i < full_sens.values.size(); ++i)
            full_sens.values[i] += sens[static_cast<std::size_t>(k)].values[i];
    }

    ImageGrid x(n, n, sys.pixel_size_mm);
    for (std::size_t i = 0; i < x.values.size(); ++i)
        x.values[i] = full_sens.values[i] > 0.0f ? 1.0f : 0.0f;

    for (int it = 0; it < iterations; ++it) {
        for (int k = 0; k < subsets; ++k) {
            const auto idx = subset_angles(sys.n_angles, subsets, k);
            Sinogram proj = forward_project_subset(x, sys, idx);
            const float eps = 1e-9f * std::max(proj.max_value(), 1e-30f);
            Sinogram ratio(sys.n_bins, sys.n_angles, sys.bin_spacing_mm, Sinogram::Kind::Expected);
            for (int a : idx) {
                for (int b = 0; b < sys.n_bins; ++b)
                    ratio.at(b, a) = counts.at(b, a) / (proj.at(b, a) + eps);
            }
            const ImageGrid update = back_project_subset(ratio, sys, n, idx);
            const ImageGrid& sk = sens[static_cast<std::size_t>(k)];
            for (std::size_t i = 0; i < x.values.size(); ++i) {
                if (sk.values[i] > 0.0f) x.values[i] *= update.values[i] / sk.values[i];
                // zero-sensitivity pixels stay frozen (0 under the full mask,
                // unchanged if only this subset misses them)
            }
        }
    }
    return x;
}

double poisson_log_likelihood(const Sinogram& counts, const Sinogram& expected) {
    if (counts.size() != expected.size())
        throw std::invalid_argument("poisson_log_likelihood: shape mismatch");
    double ll = 0.0;
    for (std::size_t i = 0; i < counts.data.size(); ++i) {
        const double y = counts.data[i];
        const double lam = expected.data[i];
        if (y > 0.0) ll += y * std::log(std::max(lam, 1e-300));
        ll -= lam;
    }
    return ll;
}

ReferencePair make_reference(const ImageGrid& phantom, const SystemModel& sys, Rng& rng,
                             const ReconConfig& cfg, double ref_count_factor) {
    if (ref_count_factor <= 0.0) throw std::invalid_argument("ref_count_factor must be > 0");
    cfg.validate(sys.n_angles);
    const Sinogram expected = forward_project(phantom, sys);

    SystemModel ref_sys = sys;
    ref_sys.total_counts = sys.total_counts * ref_count_factor;
    Rng ref_rng = rng.split("reference-counts");
    const Sinogram ref_counts = add_poisson_noise(expected, ref_sys, ref_rng);

    ReferencePair out;
    out.reference = cfg.method == ReconConfig::Method::Fbp
                        ? fbp(ref_counts, ref_sys, phantom.width)
                        : osem(ref_counts, ref_sys, phantom.width, cfg.iterations,
                               cfg.method == ReconConfig::Method::Mlem ? 1 : cfg.subsets);
    // Rescale so the reference carries training-budget units and baselines
    // reconstructed from the training sinogram are directly comparable.
    const float inv = static_cast<float>(1.0 / ref_count_factor);
    for (auto& v : out.reference.values) v *= inv;

    Rng train_rng = rng.split("train-counts");
    out.train_counts = add_poisson_noise(expected, sys, train_rng);
    return out;
}

}  // namespace pmdm
