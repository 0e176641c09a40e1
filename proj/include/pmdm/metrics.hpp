#pragma once

#include <vector>

#include "pmdm/image.hpp"

namespace pmdm {

/// 10*log10(peak^2 / MSE) with peak = max(ref); +infinity when MSE == 0.
double psnr(const ImageGrid& ref, const ImageGrid& pred);

/// Mean local SSIM: 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03,
/// dynamic range max(ref)-min(ref). A constant reference falls back to an
/// epsilon dynamic range so the constants stay positive.
double ssim(const ImageGrid& ref, const ImageGrid& pred);

/// RMSE / (max(ref) - min(ref)).
double nrmse(const ImageGrid& ref, const ImageGrid& pred);

/// Per-pixel squared error (ref - pred)^2.
ImageGrid error_map(const ImageGrid& ref, const ImageGrid& pred);

/// Empirical terms of the distortion decomposition over aligned test lists:
/// total E||r0 - sample||^2 against d_star + transport, plus the relative
/// residual. Norms are squared 2-norms per slice, averaged over slices.
struct Decomposition {
    double d_star = 0.0;     // E||r0 - mean||^2
    double transport = 0.0;  // E||mean - sample||^2
    double total = 0.0;      // E||r0 - sample||^2
    double residual = 0.0;   // |total - d_star - transport| / total
};

Decomposition decomposition_report(const std::vector<ImageGrid>& refs,
                                   const std::vector<ImageGrid>& means,
                                   const std::vector<ImageGrid>& samples);

}  // namespace pmdm
