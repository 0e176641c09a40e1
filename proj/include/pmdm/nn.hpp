#pragma once

#include <string>
#include <vector>

#include "pmdm/ops.hpp"
#include "pmdm/params.hpp"

namespace pmdm {

/// Sinogram-to-image regression net: encoder of stride-2 conv blocks with
/// channel doubling and kernel sizes stepping 7x7 -> 5x5 -> 3x3, decoder of
/// nearest-upsample + 3x3 conv blocks with channel halving, BN+ReLU
/// throughout, ReLU output to keep activity nonnegative. 10 conv layers.
struct EstimatorConfig {
    int grid_size = 32;
    int base_width = 16;
};

ParamStore init_estimator(const EstimatorConfig& cfg, Rng& rng);
/// s is the padded sinogram [N,1,grid,grid]; output has the same shape.
/// smooth_activations swaps every ReLU for SiLU: central-difference gradient
/// checks are ill-posed at ReLU kinks, so the full-composition check runs on
/// the smooth twin (the ReLU backward itself is op-level tested).
Tensor estimator_forward(ParamStore& params, const EstimatorConfig& cfg, const Tensor& s,
                         bool training, bool smooth_activations = false);

/// Conditional denoising U-Net: input is concat(r_t, condition) on channels,
/// `levels` resolution levels with skip connections, a sinusoidal timestep
/// embedding pushed through a shared MLP trunk and injected per block as a
/// channel bias. Group norm + SiLU inside; output head predicts the noise.
struct DenoiserConfig {
    int grid_size = 32;
    int base_width = 16;
    int levels = 3;    // grid must be divisible by 2^(levels-1)
    int temb_dim = 64;
    int max_groups = 8;
};

ParamStore init_denoiser(const DenoiserConfig& cfg, Rng& rng);
/// r_t and cond are [N,1,H,W]; t holds one timestep in [1,T] per sample.
Tensor denoiser_forward(ParamStore& params, const DenoiserConfig& cfg, const Tensor& r_t,
                        const std::vector<int>& t, const Tensor& cond);
/// Scalar-timestep convenience wrapper (same t for the whole batch).
Tensor denoiser_forward(ParamStore& params, const DenoiserConfig& cfg, const Tensor& r_t, int t,
                        const Tensor& cond);

/// Sinusoidal embedding, [N, dim]; deterministic and distinct for distinct t.
Tensor time_embedding(const std::vector<int>& t, int dim);

/// Kaiming-uniform (fan-in) fill used for every conv/linear weight.
void kaiming_uniform_fill(Tensor& w, int fan_in, Rng& rng);

}  // namespace pmdm
