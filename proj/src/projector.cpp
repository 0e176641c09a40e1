#include "pmdm/projector.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <thread>

namespace pmdm {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kFwhmToSigma = 1.0 / 2.3548200450309493;  // FWHM = 2*sqrt(2 ln 2) * sigma

int g_threads = 1;

/// Runs fn(lo, hi) over contiguous chunks of [0, total). fn must only touch
/// state owned by its chunk.
template <typename Fn>
void parallel_chunks(int total, const Fn& fn) {
    const int t = std::min(g_threads, total);
    if (t <= 1) {
        fn(0, total);
        return;
    }
    std::vector<std::thread> workers;
    workers.reserve(static_cast<std::size_t>(t));
    for (int w = 0; w < t; ++w) {
        const int lo = total * w / t;
        const int hi = total * (w + 1) / t;
        workers.emplace_back([&fn, lo, hi] { fn(lo, hi); });
    }
    for (auto& th : workers) th.join();
}

struct AngleGeom {
    double cos_t, sin_t;
    bool row_stepping;   // march along image rows; otherwise along columns
    double inv_dominant; // 1/|cos| or 1/|sin|, the per-step path length
};

AngleGeom angle_geom(double theta) {
    AngleGeom g{};
    g.cos_t = std::cos(theta);
    g.sin_t = std::sin(theta);
    g.row_stepping = std::fabs(g.cos_t) >= std::fabs(g.sin_t);
    g.inv_dominant = 1.0 / (g.row_stepping ? std::fabs(g.cos_t) : std::fabs(g.sin_t));
    return g;
}

/// Convolves one sinogram column (fixed angle) with the PSF kernel, zero
/// boundary. The same symmetric kernel serves forward and adjoint.
void convolve_column(const float* src, float* dst, int n_bins, int n_angles,
                     const std::vector<float>& kernel) {
    const int radius = static_cast<int>(kernel.size()) / 2;
    for (int b = 0; b < n_bins; ++b) {
        double acc = 0.0;
        const int k_lo = std::max(0, radius - b);
        const int k_hi = std::min(static_cast<int>(kernel.size()), n_bins - b + radius);
        for (int k = k_lo; k < k_hi; ++k)
            acc += static_cast<double>(kernel[static_cast<std::size_t>(k)]) *
                   src[static_cast<std::size_t>(b + k - radius) * n_angles];
        dst[static_cast<std::size_t>(b) * n_angles] = static_cast<float>(acc);
    }
}

}  // namespace

void set_projector_threads(int n) { g_threads = std::max(1, n); }
int projector_threads() { return g_threads; }

std::vector<double> SystemModel::angles() const {
    std::vector<double> out(static_cast<std::size_t>(n_angles));
    for (int a = 0; a < n_angles; ++a) out[static_cast<std::size_t>(a)] = kPi * a / n_angles;
    return out;
}

void SystemModel::validate(int image_size) const {
    if (n_angles < 1 || n_bins < 1) throw std::invalid_argument("system model: empty geometry");
    if (bin_spacing_mm <= 0.0f || pixel_size_mm <= 0.0f)
        throw std::invalid_argument("system model: spacings must be positive");
    if (psf_fwhm_mm < 0.0f) throw std::invalid_argument("system model: psf_fwhm must be >= 0");
    if (total_counts <= 0.0) throw std::invalid_argument("system model: total_counts must be > 0");
    const double diag_mm = static_cast<double>(image_size) * pixel_size_mm * std::sqrt(2.0);
    if (static_cast<double>(n_bins) * bin_spacing_mm < diag_mm)
        throw std::invalid_argument(
            "system model: detector too small, n_bins*bin_spacing = " +
            std::to_string(static_cast<double>(n_bins) * bin_spacing_mm) + " mm < image diagonal " +
            std::to_string(diag_mm) + " mm");
}

std::vector<float> psf_kernel(const SystemModel& sys) {
    if (sys.psf_fwhm_mm <= 0.0f) return {};
    const double sigma_bins = sys.psf_fwhm_mm * kFwhmToSigma / sys.bin_spacing_mm;
    const int radius = std::max(1, static_cast<int>(std::ceil(4.0 * sigma_bins)));
    std::vector<float> kernel(static_cast<std::size_t>(2 * radius + 1));
    double total = 0.0;
    for (int k = -radius; k <= radius; ++k) {
        const double w = std::exp(-0.5 * (k / sigma_bins) * (k / sigma_bins));
        kernel[static_cast<std::size_t>(k + radius)] = static_cast<float>(w);
        total += w;
    }
    for (auto& w : kernel) w = static_cast<float>(w / total);
    return kernel;
}

Sinogram forward_project(const ImageGrid& img, const SystemModel& sys) {
    std::vector<int> all(static_cast<std::size_t>(sys.n_angles));
    for (int a = 0; a < sys.n_angles; ++a) all[static_cast<std::size_t>(a)] = a;
    return forward_project_subset(img, sys, all);
}

Sinogram forward_project_subset(const ImageGrid& img, const SystemModel& sys,
                                std::span<const int> angle_indices) {
    if (img.width != img.height) throw std::invalid_argument("forward_project: image must be square");
    sys.validate(img.width);
    const int n = img.width;
    const double c = 0.5 * (n - 1);
    const double bin_c = 0.5 * (sys.n_bins - 1);
    const double delta = static_cast<double>(sys.bin_spacing_mm) / sys.pixel_size_mm;
    const auto thetas = sys.angles();

    Sinogram sino(sys.n_bins, sys.n_angles, sys.bin_spacing_mm, Sinogram::Kind::Expected);
    const auto kernel = psf_kernel(sys);

    parallel_chunks(static_cast<int>(angle_indices.size()), [&](int lo, int hi) {
        std::vector<float> column(static_cast<std::size_t>(sys.n_bins));
        for (int ai = lo; ai < hi; ++ai) {
            const int a = angle_indices[static_cast<std::size_t>(ai)];
            const AngleGeom g = angle_geom(thetas[static_cast<std::size_t>(a)]);
            for (int b = 0; b < sys.n_bins; ++b) {
                const double s = (b - bin_c) * delta;
                double acc = 0.0;
                if (g.row_stepping) {
                    for (int iy = 0; iy < n; ++iy) {
                        const double y = iy - c;
                        const double xj = (s - y * g.sin_t) / g.cos_t + c;
                        const int j0 = static_cast<int>(std::floor(xj));
                        const double w = xj - j0;
                        if (j0 >= 0 && j0 < n) acc += (1.0 - w) * img.at(iy, j0);
                        if (j0 + 1 >= 0 && j0 + 1 < n) acc += w * img.at(iy, j0 + 1);
                    }
                } else {
                    for (int ix = 0; ix < n; ++ix) {
                        const double x = ix - c;
                        const double yi = (s - x * g.cos_t) / g.sin_t + c;
                        const int i0 = static_cast<int>(std::floor(yi));
                        const double w = yi - i0;
                        if (i0 >= 0 && i0 < n) acc += (1.0 - w) * img.at(i0, ix);
                        if (i0 + 1 >= 0 && i0 + 1 < n) acc += w * img.at(i0 + 1, ix);
                    }
                }
                column[static_cast<std::size_t>(b)] = static_cast<float>(acc * g.inv_dominant);
            }
            if (kernel.empty()) {
                for (int b = 0; b < sys.n_bins; ++b) sino.at(b, a) = column[static_cast<std::size_t>(b)];
            } else {
                const int radius = static_cast<int>(kernel.size()) / 2;
                for (int b = 0; b < sys.n_bins; ++b) {
                    double acc = 0.0;
                    const int k_lo = std::max(0, radius - b);
                    const int k_hi = std::min(static_cast<int>(kernel.size()), sys.n_bins - b + radius);
                    for (int k = k_lo; k < k_hi; ++k)
                        acc += static_cast<double>(kernel[static_cast<std::size_t>(k)]) *
                               column[static_cast<std::size_t>(b + k - radius)];
                    sino.at(b, a) = static_cast<float>(acc);
                }
            }
        }
    });
    return sino;
}

ImageGrid back_project(const Sinogram& sino, const SystemModel& sys, int image_size) {
    std::vector<int> all(static_cast<std::size_t>(sys.n_angles));
    for (int a = 0; a < sys.n_angles; ++a) all[static_cast<std::size_t>(a)] = a;
    return back_project_subset(sino, sys, image_size, all);
}

ImageGrid back_project_subset(const Sinogram& sino, const SystemModel& sys, int image_size,
                              std::span<const int> angle_indices) {
    if (sino.n_bins != sys.n_bins || sino.n_angles != sys.n_angles)
        throw std::invalid_argument("back_project: sinogram shape does not match system model");
    sys.validate(image_size);
    const int n = image_size;
    const double c = 0.5 * (n - 1);
    const double bin_c = 0.5 * (sys.n_bins - 1);
    const double delta = static_cast<double>(sys.bin_spacing_mm) / sys.pixel_size_mm;
    const auto thetas = sys.angles();
    const auto kernel = psf_kernel(sys);

    // Adjoint of the PSF stage first (the kernel is symmetric and the
    // convolution uses a zero boundary, so it is its own transpose).
    Sinogram blurred = sino;
    if (!kernel.empty()) {
        parallel_chunks(static_cast<int>(angle_indices.size()), [&](int lo, int hi) {
            for (int ai = lo; ai < hi; ++ai) {
                const int a = angle_indices[static_cast<std::size_t>(ai)];
                convolve_column(sino.data.data() + a, blurred.data.data() + a, sys.n_bins,
                                sys.n_angles, kernel);
            }
        });
    }

    ImageGrid img(n, n, sys.pixel_size_mm);
    // Adjoint of the marching stage. Threads own disjoint row blocks; each
    // pixel sees contributions in the same (angle, bin, step) order as a
    // sequential run, so the result is bit-identical for any thread count.
    parallel_chunks(n, [&](int row_lo, int row_hi) {
        for (std::size_t ai = 0; ai < angle_indices.size(); ++ai) {
            const int a = angle_indices[ai];
            const AngleGeom g = angle_geom(thetas[static_cast<std::size_t>(a)]);
            for (int b = 0; b < sys.n_bins; ++b) {
                const float v = blurred.at(b, a);
                if (v == 0.0f) continue;
                const double s = (b - bin_c) * delta;
                const float val = static_cast<float>(v * g.inv_dominant);
                if (g.row_stepping) {
                    for (int iy = row_lo; iy < row_hi; ++iy) {
                        const double y = iy - c;
                        const double xj = (s - y * g.sin_t) / g.cos_t + c;
                        const int j0 = static_cast<int>(std::floor(xj));
                        const float w = static_cast<float>(xj - j0);
                        if (j0 >= 0 && j0 < n) img.at(iy, j0) += val * (1.0f - w);
                        if (j0 + 1 >= 0 && j0 + 1 < n) img.at(iy, j0 + 1) += val * w;
                    }
                } else {
                    for (int ix = 0; ix < n; ++ix) {
                        const double x = ix - c;
                        const double yi = (s - x * g.cos_t) / g.sin_t + c;
                        const int i0 = static_cast<int>(std::floor(yi));
                        const float w = static_cast<float>(yi - i0);
                        if (i0 >= row_lo && i0 < row_hi && i0 >= 0 && i0 < n)
                            img.at(i0, ix) += val * (1.0f - w);
                        if (i0 + 1 >= row_lo && i0 + 1 < row_hi && i0 + 1 < n && i0 + 1 >= 0)
                            img.at(i0 + 1, ix) += val * w;
                    }
                }
            }
        }
    });
    return img;
}

Sinogram add_poisson_noise(const Sinogram& expected, const SystemModel& sys, Rng& rng) {
    if (expected.kind != Sinogram::Kind::Expected)
        throw std::invalid_argument("add_poisson_noise: input must be an expected-counts sinogram");
    for (float v : expected.data)
        if (v < 0.0f) throw std::invalid_argument("add_poisson_noise: negative expected value");
    Sinogram counts(expected.n_bins, expected.n_angles, expected.bin_spacing_mm,
                    Sinogram::Kind::Counts);
    const double total = expected.sum();
    if (total <= 0.0) return counts;  // no activity, no counts
    const double scale = sys.total_counts / total;
    for (std::size_t i = 0; i < expected.data.size(); ++i)
        counts.data[i] = static_cast<float>(rng.poisson(expected.data[i] * scale));
    return counts;
}

}  // namespace pmdm
