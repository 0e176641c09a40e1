#pragma once

#include <map>
#include <string>
#include <vector>

#include "pmdm/config.hpp"
#include "pmdm/metrics.hpp"
#include "pmdm/phantom.hpp"

namespace pmdm {

/// Bad or missing on-disk data / mismatched artifacts (CLI exit code 2).
struct DataError : std::runtime_error {
    explicit DataError(const std::string& what) : std::runtime_error(what) {}
};
/// Non-finite numerics, e.g. a diverged training loss (CLI exit code 3).
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

/// Per-slice normalization scale: mean counts per bin (floor 1e-12).
double sino_norm_scale(const Sinogram& sino);

/// Pads a sinogram to grid x grid (centered) and divides by scale -> [1,1,g,g].
Tensor sino_to_input(const Sinogram& sino, int grid, double scale);

/// Stable per-slice artifact stem, e.g. "p003_a01".
std::string slice_stem(const ManifestRecord& rec);

struct LoadedSlice {
    ManifestRecord rec;
    ImageGrid ref;    // reference image r0, training-budget units
    Sinogram sino;    // observed training counts
    double scale;     // sino_norm_scale(sino)
    Tensor input;     // [1,1,g,g] padded sino / scale
    Tensor target;    // [1,1,g,g] ref / scale
};

std::vector<LoadedSlice> load_slices(const std::string& data_dir, const Manifest& manifest,
                                     const std::string& split, int grid);

/// phantoms -> rotation augmentations -> expected sinograms -> (high-count
/// OSEM reference, training-count sinogram) -> manifest with phantom-level
/// split. Writes everything under out_dir, plus the resolved config.
void run_simulate(const RunConfig& cfg, const std::string& out_dir);

/// Trains f_phi on (padded sinogram, reference) pairs under MSE; keeps the
/// best-validation checkpoint at ckpt_path (sidecar at ckpt_path + ".meta").
void run_train_estimator(const RunConfig& cfg, const std::string& data_dir,
                         const std::string& ckpt_path);

/// Precomputes the frozen-estimator conditions once, then trains the
/// denoiser. Checkpoints (weights + optimizer + rng state) are rewritten
/// every epoch so training can resume bitwise via resume_from.
void run_train_diffusion(const RunConfig& cfg, const std::string& data_dir,
                         const std::string& estimator_ckpt, const std::string& ckpt_path,
                         const std::string& resume_from = "");

/// Reverse-diffusion sampling over one manifest split. Writes one PIMG (and
/// a PGM preview) per slice and per posterior sample.
void run_sample(const std::string& data_dir, const std::string& denoiser_ckpt,
                const std::string& estimator_ckpt, const std::string& out_dir,
                const std::string& split, int n_samples, std::uint64_t seed, int threads);

/// Runs the estimator alone over a split (posterior-mean predictions).
void run_estimator_predict(const std::string& data_dir, const std::string& estimator_ckpt,
                           const std::string& out_dir, const std::string& split);

/// FBP / MLEM / OSEM over the split's training sinograms.
void run_baseline(const RunConfig& cfg, const std::string& data_dir, const std::string& method,
                  const std::string& out_dir, const std::string& split = "test");

struct EvaluateOptions {
    struct MethodDir {
        std::string label;
        std::string dir;
    };
    std::vector<MethodDir> methods;  // table order follows this order
    std::string split = "test";
    std::string means_dir;    // optional: enables the decomposition block
    std::string samples_dir;  // optional: ditto
    bool montages = true;
};

struct MethodSummary {
    std::string label;
    std::vector<double> psnr, ssim, nrmse;  // per slice
    double psnr_mean = 0, psnr_std = 0, ssim_mean = 0, ssim_std = 0, nrmse_mean = 0;
};

struct EvaluationReport {
    std::vector<MethodSummary> methods;
    bool has_decomposition = false;
    Decomposition decomposition;
};

EvaluationReport run_evaluate(const std::string& data_dir, const EvaluateOptions& opts,
                              const std::string& out_dir);

/// key=value sidecar helpers shared by checkpoints.
std::map<std::string, std::string> parse_kv(const std::string& text);

}  // namespace pmdm
