#pragma once

#include "pmdm/image.hpp"
#include "pmdm/projector.hpp"
#include "pmdm/tensor.hpp"

namespace pmdm {

struct ReconConfig {
    enum class Method { Fbp, Mlem, Osem };
    Method method = Method::Osem;
    int iterations = 10;
    int subsets = 6;
    float init_value = 1.0f;

    void validate(int n_angles) const;
};

/// Ram-Lak filtered back-projection: band-limited ramp applied per angle by
/// direct convolution, back_project, scale by pi/n_angles, clip negatives.
ImageGrid fbp(const Sinogram& sino, const SystemModel& sys, int image_size);

/// MLEM: x <- x / A^T 1 * A^T(y / (A x + eps)). Strictly positive iterates
/// except where sensitivity is zero (frozen at 0); Poisson log-likelihood is
/// non-decreasing per iteration.
ImageGrid mlem(const Sinogram& counts, const SystemModel& sys, int image_size, int iterations);

/// Ordered-subsets MLEM over angle-interleaved subsets (subset k takes
/// angles k, k+subsets, ...). One iteration = one pass over all subsets.
/// subsets == 1 reproduces mlem() bit for bit (same code path).
ImageGrid osem(const Sinogram& counts, const SystemModel& sys, int image_size, int iterations,
               int subsets);

/// Poisson log-likelihood of counts y under expected projection yhat,
/// dropping the data-only log(y!) term: sum(y*log(yhat) - yhat).
double poisson_log_likelihood(const Sinogram& counts, const Sinogram& expected);

struct ReferencePair {
    Sinogram train_counts;  // training-budget Poisson draw
    ImageGrid reference;    // OSEM of the high-count draw, rescaled to the training budget
};

/// The reference-image generator: Poisson draws of the same expected
/// sinogram at ref_count_factor x budget (for the OSEM reference, rescaled
/// back by 1/factor so units match the training budget) and at 1x (training
/// input).
ReferencePair make_reference(const ImageGrid& phantom, const SystemModel& sys, Rng& rng,
                             const ReconConfig& cfg, double ref_count_factor);

}  // namespace pmdm
