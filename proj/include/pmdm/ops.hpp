#pragma once

#include "pmdm/tensor.hpp"

namespace pmdm::ops {

// Elementwise / shape ops. All register tape nodes when an input requires
// grad and are no-ops on the tape otherwise.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
Tensor relu(const Tensor& x);
Tensor leaky_relu(const Tensor& x, float negative_slope = 0.01f);
Tensor silu(const Tensor& x);
Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor nearest_upsample2x(const Tensor& x);

/// x[N,Din] * w[Dout,Din]^T + b[Dout] -> [N,Dout]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

/// Cross-correlation, x[N,C,H,W] * w[K,C,kh,kw] + b[K].
/// kh,kw odd; H' = floor((H+2p-kh)/stride)+1.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int padding);

/// Train mode normalizes by batch statistics and updates running stats in
/// place (momentum convention: run = (1-m)*run + m*batch). Eval mode uses
/// the running stats. gamma/beta are [C]; running stats are grad-free leaves.
Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    Tensor& running_mean, Tensor& running_var,
                    float momentum, float eps, bool training);

/// Per-sample, per-group normalization over (C/groups, H, W). Batch-size
/// independent, so inference does not depend on batch composition.
Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  int groups, float eps);

/// Adds bias[N,C] to every spatial position of x[N,C,H,W].
Tensor add_sample_channel_bias(const Tensor& x, const Tensor& bias);

Tensor mean_all(const Tensor& x);
/// mean((a-b)^2) over all elements.
Tensor mse(const Tensor& a, const Tensor& b);

// Row-major GEMM kernels (also used by tests).
// C[M,N] (+)= A[M,K] * B[K,N]
void gemm_nn(int M, int N, int K, const float* A, const float* B, float* C, bool accumulate);
// C[M,N] (+)= A[M,K] * B[N,K]^T
void gemm_nt(int M, int N, int K, const float* A, const float* B, float* C, bool accumulate);
// C[M,N] (+)= A[K,M]^T * B[K,N]
void gemm_tn(int M, int N, int K, const float* A, const float* B, float* C, bool accumulate);

}  // namespace pmdm::ops
