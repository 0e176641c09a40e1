#pragma once

#include <cstdint>
#include <string>

#include "pmdm/classical.hpp"
#include "pmdm/diffusion.hpp"
#include "pmdm/nn.hpp"
#include "pmdm/phantom.hpp"
#include "pmdm/projector.hpp"

namespace pmdm {

/// Everything one experiment needs, with toy-scale defaults that run end to
/// end on a single CPU core. Flat key=value text format, '#' comments.
struct RunConfig {
    // geometry / simulation
    int grid_size = 32;
    float pixel_size_mm = 2.0f;
    int n_bins = 0;            // 0 = grid_size (keeps sinograms paddable to grid)
    int n_angles = 30;
    float bin_spacing_mm = 0.0f;  // 0 = 1.5 * pixel_size
    float psf_fwhm_mm = 2.5f;
    double total_counts = 5e5;
    double ref_count_factor = 50.0;

    // reference reconstruction
    int recon_iterations = 10;
    int recon_subsets = 6;

    // dataset
    int n_phantoms = 20;
    int augment_per_phantom = 5;
    float angle_lo_deg = 0.0f;
    float angle_hi_deg = 15.0f;
    int split_train = 17;
    int split_val = 1;
    int split_test = 2;

    // estimator stage
    int est_base_width = 16;
    float est_lr = 1e-4f;
    float est_weight_decay = 1e-5f;
    int est_epochs = 40;

    // diffusion stage
    int diff_T = 100;
    double diff_beta_min = 1e-3;
    double diff_beta_max = 0.2;
    std::string diff_sigma_mode = "beta";            // beta | beta_tilde
    std::string diff_condition = "posterior_mean";   // posterior_mean | sinogram
    int unet_base_width = 16;
    int unet_levels = 3;
    int temb_dim = 64;
    float diff_lr = 3e-5f;
    int diff_epochs = 40;

    // shared
    int batch_size = 4;
    std::uint64_t seed = 42;
    int threads = 1;

    SystemModel system_model() const;
    DatasetSpec dataset_spec() const;
    ReconConfig recon_config() const;
    EstimatorConfig estimator_config() const;
    DenoiserConfig denoiser_config() const;
    DiffusionConfig diffusion_config() const;

    void validate() const;
    std::string to_text() const;

    static RunConfig from_text(const std::string& text);
    static RunConfig from_file(const std::string& path);
    void save(const std::string& path) const;
};

}  // namespace pmdm
