#pragma once

#include <functional>
#include <string>
#include <vector>

#include "pmdm/nn.hpp"
#include "pmdm/params.hpp"

namespace pmdm {

struct DiffusionConfig {
    int T = 1000;
    double beta_min = 1e-4;
    double beta_max = 0.02;
    enum class SigmaMode { Beta, BetaTilde };
    SigmaMode sigma_mode = SigmaMode::Beta;
    enum class Conditioning { PosteriorMean, Sinogram };
    Conditioning conditioning = Conditioning::PosteriorMean;
};

/// The whole diffusion timetable: beta_t, alpha_t = 1 - beta_t, the running
/// product alpha_bar_t, and the reverse-step noise scale sigma_t. Arrays are
/// 0-indexed by t-1 for t in [1, T].
struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta;
    std::vector<double> alpha;
    std::vector<double> alpha_bar;
    std::vector<double> sigma;

    double beta_at(int t) const { return beta.at(static_cast<std::size_t>(t - 1)); }
    double alpha_at(int t) const { return alpha.at(static_cast<std::size_t>(t - 1)); }
    double alpha_bar_at(int t) const { return alpha_bar.at(static_cast<std::size_t>(t - 1)); }
    double sigma_at(int t) const { return sigma.at(static_cast<std::size_t>(t - 1)); }
    /// FNV-1a over the raw schedule bytes; checkpoints refuse mismatches.
    std::string hash_hex() const;
};

/// Linear beta from beta_min to beta_max over T steps plus derived arrays.
NoiseSchedule make_schedule(const DiffusionConfig& cfg);

/// r_t = sqrt(alpha_bar_t) * r0 + sqrt(1 - alpha_bar_t) * eps, exactly.
Tensor q_sample(const Tensor& r0, int t, const Tensor& eps, const NoiseSchedule& sched);

/// Noise predictor abstraction so samplers work with the trained U-Net or
/// with analytic test oracles interchangeably.
using EpsPredictor =
    std::function<Tensor(const Tensor& r_t, const std::vector<int>& t, const Tensor& cond)>;

EpsPredictor make_denoiser_predictor(ParamStore& params, const DenoiserConfig& cfg);

/// One ancestral step: r_{t-1} = (r_t - beta_t/sqrt(1-alpha_bar_t) * eps_hat)
/// / sqrt(alpha_t) + sigma_t * z, with z = 0 at the final step (t == 1).
Tensor p_sample_step_from_eps(const Tensor& r_t, int t, const Tensor& eps_hat,
                              const NoiseSchedule& sched, Rng& rng);
Tensor p_sample_step(const EpsPredictor& predictor, const Tensor& r_t, int t, const Tensor& cond,
                     const NoiseSchedule& sched, Rng& rng);

struct SampleResult {
    Tensor value;  // clipped to >= 0 (activity nonnegativity)
    Tensor raw;    // unclipped chain output
};

/// Full reverse chain from r_T ~ N(0, I) down to t = 1.
SampleResult sample(const EpsPredictor& predictor, const Tensor& cond, const NoiseSchedule& sched,
                    Rng& rng);

/// Denoising objective: per batch element draw t ~ U[1,T] and eps ~ N(0,I),
/// form r_t, and return mean squared error between eps and the prediction.
Tensor training_loss(ParamStore& theta, const DenoiserConfig& net_cfg, const Tensor& r0,
                     const Tensor& cond, Rng& rng, const NoiseSchedule& sched);

struct EpochStats {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
};

/// Runs `epochs` additional epochs of denoiser training in place (the
/// estimator stays frozen: conditions are precomputed tensors). Batches are
/// reshuffled per epoch from `rng`; pass a restored rng state together with
/// start_epoch to resume a run bitwise. Reported epochs count from
/// start_epoch.
void train_diffusion_epochs(ParamStore& theta, const DenoiserConfig& net_cfg,
                            const NoiseSchedule& sched, const std::vector<Tensor>& train_r0,
                            const std::vector<Tensor>& train_cond,
                            const std::vector<Tensor>& val_r0, const std::vector<Tensor>& val_cond,
                            int epochs, int batch_size, const AdamConfig& adam, Rng& rng,
                            const std::function<void(const EpochStats&)>& on_epoch,
                            int start_epoch = 0);

}  // namespace pmdm
