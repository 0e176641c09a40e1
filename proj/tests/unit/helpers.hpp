#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "pmdm/tensor.hpp"

namespace testutil {

inline std::vector<float> random_vec(pmdm::Rng& rng, std::size_t n, float lo = -1.0f, float hi = 1.0f) {
    std::vector<float> v(n);
    for (auto& x : v) x = lo + (hi - lo) * static_cast<float>(rng.uniform());
    return v;
}

inline double rel_err(double a, double b) {
    const double denom = std::max({std::fabs(a), std::fabs(b), 1e-6});
    return std::fabs(a - b) / denom;
}

/// Central-difference directional derivative of loss() while jiggling the
/// values of `x` along `dir` (unit direction not required). x + h*dir rounds
/// to float32, so when effective_dir is given it receives the perturbation
/// that was actually applied, (x_plus - x_minus) / 2h; compare the analytic
/// gradient against that to cancel the quantization of the step itself.
inline double numeric_directional(pmdm::Tensor& x, const std::vector<float>& dir, float h,
                                  const std::function<double()>& loss,
                                  std::vector<float>* effective_dir = nullptr) {
    auto& vals = x.values();
    std::vector<float> saved = vals;
    std::vector<float> plus(vals.size()), minus(vals.size());
    for (std::size_t i = 0; i < vals.size(); ++i) {
        plus[i] = saved[i] + h * dir[i];
        minus[i] = saved[i] - h * dir[i];
    }
    vals = plus;
    const double up = loss();
    vals = minus;
    const double down = loss();
    vals = saved;
    if (effective_dir) {
        effective_dir->resize(vals.size());
        for (std::size_t i = 0; i < vals.size(); ++i)
            (*effective_dir)[i] =
                static_cast<float>((static_cast<double>(plus[i]) - minus[i]) / (2.0 * h));
    }
    return (up - down) / (2.0 * static_cast<double>(h));
}

/// Fourth-order central stencil at the same h: truncation drops from
/// O(h^2 f''') to O(h^4 f^(5)), which matters for deep compositions whose
/// directional curvature is large at h = 1e-3.
inline double numeric_directional4(pmdm::Tensor& x, const std::vector<float>& dir, float h,
                                   const std::function<double()>& loss,
                                   std::vector<float>* effective_dir = nullptr) {
    auto& vals = x.values();
    const std::vector<float> saved = vals;
    auto eval_at = [&](float step) {
        for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = saved[i] + step * dir[i];
        const double v = loss();
        return v;
    };
    const double up2 = eval_at(2.0f * h);
    const double up1 = eval_at(h);
    if (effective_dir) {
        // the +-h pair actually applied, for quantization-free comparison
        std::vector<float> plus = vals;
        for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = saved[i] - h * dir[i];
        effective_dir->resize(vals.size());
        for (std::size_t i = 0; i < vals.size(); ++i)
            (*effective_dir)[i] =
                static_cast<float>((static_cast<double>(plus[i]) - vals[i]) / (2.0 * h));
    }
    const double dn1 = eval_at(-h);
    const double dn2 = eval_at(-2.0f * h);
    vals = saved;
    return (-up2 + 8.0 * up1 - 8.0 * dn1 + dn2) / (12.0 * static_cast<double>(h));
}

/// grad . dir for a leaf tensor with populated gradient.
inline double analytic_directional(const pmdm::Tensor& x, const std::vector<float>& dir) {
    double acc = 0.0;
    const float* g = x.grad();
    for (std::size_t i = 0; i < dir.size(); ++i) acc += static_cast<double>(g[i]) * dir[i];
    return acc;
}

/// Rademacher direction (+-1 entries) keeps every coordinate in play.
inline std::vector<float> rademacher(pmdm::Rng& rng, std::size_t n) {
    std::vector<float> v(n);
    for (auto& x : v) x = rng.uniform() < 0.5 ? -1.0f : 1.0f;
    return v;
}

}  // namespace testutil
