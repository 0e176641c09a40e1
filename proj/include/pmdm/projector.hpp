#pragma once

#include <span>
#include <vector>

#include "pmdm/image.hpp"
#include "pmdm/tensor.hpp"

namespace pmdm {

/// The discrete forward operator A: parallel-beam geometry with angles
/// uniform over [0, pi), a Gaussian detector PSF along the bin axis, and a
/// photon count budget for the Poisson stage.
struct SystemModel {
    int n_angles = 60;
    int n_bins = 96;
    float bin_spacing_mm = 2.0f;
    float pixel_size_mm = 2.0f;
    float psf_fwhm_mm = 2.5f;
    double total_counts = 5e5;

    std::vector<double> angles() const;  // radians, uniform over [0, pi)
    void validate(int image_size) const;
};

/// Line integrals via Joseph's method (interpolated ray marching along the
/// dominant axis, path measured in pixel units) followed by the PSF blur.
/// Linear and nonnegative.
Sinogram forward_project(const ImageGrid& img, const SystemModel& sys);

/// The exact adjoint of forward_project: <Ax, y> == <x, A^T y> up to float
/// rounding. MLEM's convergence guarantee depends on this pairing.
ImageGrid back_project(const Sinogram& sino, const SystemModel& sys, int image_size);

/// Restriction of A (and its adjoint) to a subset of view angles; used by
/// ordered-subsets reconstruction. angle_indices must be valid and unique.
Sinogram forward_project_subset(const ImageGrid& img, const SystemModel& sys,
                                std::span<const int> angle_indices);
ImageGrid back_project_subset(const Sinogram& sino, const SystemModel& sys, int image_size,
                              std::span<const int> angle_indices);

/// Scales the expected sinogram so its sum equals sys.total_counts, then
/// replaces each bin by a Poisson draw with that mean.
Sinogram add_poisson_noise(const Sinogram& expected, const SystemModel& sys, Rng& rng);

/// Gaussian PSF kernel over bins for this model (odd length, sums to 1), or
/// empty when psf_fwhm_mm == 0.
std::vector<float> psf_kernel(const SystemModel& sys);

/// Number of worker threads used for the angle loops (1 = sequential).
/// Results are bit-identical for any thread count: each angle's output slice
/// is computed independently with a fixed per-angle reduction order.
void set_projector_threads(int n);
int projector_threads();

}  // namespace pmdm
