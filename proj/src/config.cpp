#include "pmdm/config.hpp"

#include <cstdio>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>

#include "pmdm/io.hpp"

namespace pmdm {

SystemModel RunConfig::system_model() const {
    SystemModel sys;
    sys.n_angles = n_angles;
    sys.n_bins = n_bins > 0 ? n_bins : grid_size;
    sys.pixel_size_mm = pixel_size_mm;
    sys.bin_spacing_mm = bin_spacing_mm > 0.0f ? bin_spacing_mm : 1.5f * pixel_size_mm;
    sys.psf_fwhm_mm = psf_fwhm_mm;
    sys.total_counts = total_counts;
    return sys;
}

DatasetSpec RunConfig::dataset_spec() const {
    DatasetSpec d;
    d.n_phantoms = n_phantoms;
    d.augment_per_phantom = augment_per_phantom;
    d.grid_size = grid_size;
    d.pixel_size_mm = pixel_size_mm;
    d.seed = seed;
    d.angle_lo_deg = angle_lo_deg;
    d.angle_hi_deg = angle_hi_deg;
    d.n_train = split_train;
    d.n_val = split_val;
    d.n_test = split_test;
    return d;
}

ReconConfig RunConfig::recon_config() const {
    ReconConfig r;
    r.method = ReconConfig::Method::Osem;
    r.iterations = recon_iterations;
    r.subsets = recon_subsets;
    return r;
}

EstimatorConfig RunConfig::estimator_config() const {
    EstimatorConfig e;
    e.grid_size = grid_size;
    e.base_width = est_base_width;
    return e;
}

DenoiserConfig RunConfig::denoiser_config() const {
    DenoiserConfig d;
    d.grid_size = grid_size;
    d.base_width = unet_base_width;
    d.levels = unet_levels;
    d.temb_dim = temb_dim;
    return d;
}

DiffusionConfig RunConfig::diffusion_config() const {
    DiffusionConfig d;
    d.T = diff_T;
    d.beta_min = diff_beta_min;
    d.beta_max = diff_beta_max;
    if (diff_sigma_mode == "beta")
        d.sigma_mode = DiffusionConfig::SigmaMode::Beta;
    else if (diff_sigma_mode == "beta_tilde")
        d.sigma_mode = DiffusionConfig::SigmaMode::BetaTilde;
    else
        throw std::invalid_argument("diff_sigma_mode must be beta or beta_tilde, got " + diff_sigma_mode);
    if (diff_condition == "posterior_mean")
        d.conditioning = DiffusionConfig::Conditioning::PosteriorMean;
    else if (diff_condition == "sinogram")
        d.conditioning = DiffusionConfig::Conditioning::Sinogram;
    else
        throw std::invalid_argument("diff_condition must be posterior_mean or sinogram, got " +
                                    diff_condition);
    return d;
}

void RunConfig::validate() const {
    system_model().validate(grid_size);
    const SystemModel sys = system_model();
    if (sys.n_bins > grid_size || sys.n_angles > grid_size)
        throw std::invalid_argument(
            "sinogram (" + std::to_string(sys.n_bins) + "x" + std::to_string(sys.n_angles) +
            ") must fit inside the network grid " + std::to_string(grid_size) +
            "; raise grid_size or lower n_bins/n_angles");
    recon_config().validate(n_angles);
    if (split_train + split_val + split_test != n_phantoms)
        throw std::invalid_argument("split sizes must sum to n_phantoms");
    if (split_train < 1 || split_val < 0 || split_test < 1)
        throw std::invalid_argument("need at least 1 train and 1 test phantom");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (est_epochs < 1 || diff_epochs < 1) throw std::invalid_argument("epochs must be >= 1");
    make_schedule(diffusion_config());  // throws on invalid beta range
    estimator_config();                 // struct-level checks happen at init
    if (threads < 1) throw std::invalid_argument("threads must be >= 1");
}

namespace {

struct Field {
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string fmt_float(float v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(v));
    return buf;
}

const std::map<std::string, Field>& field_table() {
    static const std::map<std::string, Field> table = [] {
        std::map<std::string, Field> t;
        auto add_int = [&t](const std::string& k, int RunConfig::* m) {
            t[k] = {[m](const RunConfig& c) { return std::to_string(c.*m); },
                    [m](RunConfig& c, const std::string& v) { c.*m = std::stoi(v); }};
        };
        auto add_float = [&t](const std::string& k, float RunConfig::* m) {
            t[k] = {[m](const RunConfig& c) { return fmt_float(c.*m); },
                    [m](RunConfig& c, const std::string& v) { c.*m = std::stof(v); }};
        };
        auto add_double = [&t](const std::string& k, double RunConfig::* m) {
            t[k] = {[m](const RunConfig& c) { return fmt_double(c.*m); },
                    [m](RunConfig& c, const std::string& v) { c.*m = std::stod(v); }};
        };
        auto add_string = [&t](const std::string& k, std::string RunConfig::* m) {
            t[k] = {[m](const RunConfig& c) { return c.*m; },
                    [m](RunConfig& c, const std::string& v) { c.*m = v; }};
        };
        add_int("grid_size", &RunConfig::grid_size);
        add_float("pixel_size_mm", &RunConfig::pixel_size_mm);
        add_int("n_bins", &RunConfig::n_bins);
        add_int("n_angles", &RunConfig::n_angles);
        add_float("bin_spacing_mm", &RunConfig::bin_spacing_mm);
        add_float("psf_fwhm_mm", &RunConfig::psf_fwhm_mm);
        add_double("total_counts", &RunConfig::total_counts);
        add_double("ref_count_factor", &RunConfig::ref_count_factor);
        add_int("recon_iterations", &RunConfig::recon_iterations);
        add_int("recon_subsets", &RunConfig::recon_subsets);
        add_int("n_phantoms", &RunConfig::n_phantoms);
        add_int("augment_per_phantom", &RunConfig::augment_per_phantom);
        add_float("angle_lo_deg", &RunConfig::angle_lo_deg);
        add_float("angle_hi_deg", &RunConfig::angle_hi_deg);
        add_int("split_train", &RunConfig::split_train);
        add_int("split_val", &RunConfig::split_val);
        add_int("split_test", &RunConfig::split_test);
        add_int("est_base_width", &RunConfig::est_base_width);
        add_float("est_lr", &RunConfig::est_lr);
        add_float("est_weight_decay", &RunConfig::est_weight_decay);
        add_int("est_epochs", &RunConfig::est_epochs);
        add_int("diff_T", &RunConfig::diff_T);
        add_double("diff_beta_min", &RunConfig::diff_beta_min);
        add_double("diff_beta_max", &RunConfig::diff_beta_max);
        add_string("diff_sigma_mode", &RunConfig::diff_sigma_mode);
        add_string("diff_condition", &RunConfig::diff_condition);
        add_int("unet_base_width", &RunConfig::unet_base_width);
        add_int("unet_levels", &RunConfig::unet_levels);
        add_int("temb_dim", &RunConfig::temb_dim);
        add_float("diff_lr", &RunConfig::diff_lr);
        add_int("diff_epochs", &RunConfig::diff_epochs);
        add_int("batch_size", &RunConfig::batch_size);
        t["seed"] = {[](const RunConfig& c) { return std::to_string(c.seed); },
                     [](RunConfig& c, const std::string& v) { c.seed = std::stoull(v); }};
        add_int("threads", &RunConfig::threads);
        return t;
    }();
    return table;
}

}  // namespace

std::string RunConfig::to_text() const {
    std::ostringstream ss;
    ss << "# experiment configuration (key=value)\n";
    for (const auto& [key, field] : field_table()) ss << key << "=" << field.get(*this) << "\n";
    return ss.str();
}

RunConfig RunConfig::from_text(const std::string& text) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        // trim
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos) continue;
        const auto last = line.find_last_not_of(" \t\r");
        line = line.substr(first, last - first + 1);
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config line " + std::to_string(line_no) + ": expected key=value");
        std::string key = line.substr(0, eq);
        std::string value = line.substr(eq + 1);
        const auto kend = key.find_last_not_of(" \t");
        key = key.substr(0, kend == std::string::npos ? 0 : kend + 1);
        const auto vstart = value.find_first_not_of(" \t");
        value = vstart == std::string::npos ? "" : value.substr(vstart);
        const auto& table = field_table();
        auto it = table.find(key);
        if (it == table.end())
            throw std::invalid_argument("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
        it->second.set(cfg, value);
    }
    return cfg;
}

RunConfig RunConfig::from_file(const std::string& path) { return from_text(read_text_file(path)); }

void RunConfig::save(const std::string& path) const { write_text_file(path, to_text()); }

}  // namespace pmdm
