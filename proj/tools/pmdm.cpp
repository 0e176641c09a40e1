// Command-line front end: simulate | train-estimator | train-diffusion |
// sample | evaluate | baseline. Exit codes: 0 ok, 1 usage, 2 data error,
// 3 numeric failure.

#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pmdm/pipeline.hpp"

namespace {

pmdm::RunConfig load_config(const std::string& config_path, std::uint64_t* seed_override,
                            int* threads_override) {
    pmdm::RunConfig cfg;
    if (!config_path.empty()) cfg = pmdm::RunConfig::from_file(config_path);
    if (seed_override) cfg.seed = *seed_override;
    if (threads_override) cfg.threads = *threads_override;
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Two-stage PET reconstruction: posterior-mean estimator + conditional diffusion"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir = "out";
    std::uint64_t seed = 0;
    bool seed_set = false;
    int threads = 0;
    app.add_option("--config", config_path, "configuration file (key=value)")->envname("PMDM_CONFIG");
    app.add_option("--out", out_dir, "output directory");
    app.add_option("--seed", seed, "seed override")->each([&](const std::string&) { seed_set = true; });
    app.add_option("--threads", threads, "worker threads for the projector loops");

    auto* sim = app.add_subcommand("simulate", "generate phantoms, sinograms, and references");

    auto* tre = app.add_subcommand("train-estimator", "train the posterior-mean estimator");
    std::string data_dir = "out";
    std::string ckpt = "";
    tre->add_option("--data", data_dir, "dataset directory (from simulate)");
    tre->add_option("--ckpt", ckpt, "checkpoint output path");

    auto* trd = app.add_subcommand("train-diffusion", "train the conditional denoiser");
    std::string est_ckpt = "";
    std::string resume = "";
    std::string condition = "";
    trd->add_option("--data", data_dir, "dataset directory");
    trd->add_option("--estimator", est_ckpt, "trained estimator checkpoint");
    trd->add_option("--ckpt", ckpt, "checkpoint output path");
    trd->add_option("--resume", resume, "resume from an earlier checkpoint");
    trd->add_option("--condition", condition, "posterior_mean | sinogram (ablation)");

    auto* smp = app.add_subcommand("sample", "reverse-diffusion sampling over a split");
    std::string den_ckpt = "";
    std::string split = "test";
    int n_samples = 1;
    smp->add_option("--data", data_dir, "dataset directory");
    smp->add_option("--denoiser", den_ckpt, "denoiser checkpoint");
    smp->add_option("--estimator", est_ckpt, "estimator checkpoint");
    smp->add_option("--split", split, "manifest split to sample");
    smp->add_option("--n-samples", n_samples, "posterior samples per slice");

    auto* est = app.add_subcommand("estimate", "posterior-mean predictions over a split");
    est->add_option("--data", data_dir, "dataset directory");
    est->add_option("--estimator", est_ckpt, "estimator checkpoint");
    est->add_option("--split", split, "manifest split");

    auto* bas = app.add_subcommand("baseline", "classical reconstruction over a split");
    std::string method = "osem";
    bas->add_option("--data", data_dir, "dataset directory");
    bas->add_option("--method", method, "fbp | mlem | osem");
    bas->add_option("--split", split, "manifest split");

    auto* evl = app.add_subcommand("evaluate", "metric report over prediction directories");
    std::vector<std::string> pred_dirs;
    std::string means_dir, samples_dir;
    bool no_montage = false;
    evl->add_option("--data", data_dir, "dataset directory");
    evl->add_option("--pred", pred_dirs, "label=dir prediction directories (table order)")
        ->expected(-1);
    evl->add_option("--means", means_dir, "posterior-mean predictions (decomposition block)");
    evl->add_option("--samples", samples_dir, "diffusion samples (decomposition block)");
    evl->add_flag("--no-montage", no_montage, "skip montage images");
    evl->add_option("--split", split, "manifest split");

    CLI11_PARSE(app, argc, argv);

    try {
        pmdm::RunConfig cfg = load_config(config_path, seed_set ? &seed : nullptr,
                                          threads > 0 ? &threads : nullptr);
        if (sim->parsed()) {
            pmdm::run_simulate(cfg, out_dir);
        } else if (tre->parsed()) {
            if (ckpt.empty()) ckpt = out_dir + "/estimator.pmdm";
            pmdm::run_train_estimator(cfg, data_dir, ckpt);
        } else if (trd->parsed()) {
            if (!condition.empty()) cfg.diff_condition = condition;
            if (est_ckpt.empty()) est_ckpt = data_dir + "/estimator.pmdm";
            if (ckpt.empty())
                ckpt = out_dir + (cfg.diff_condition == "sinogram" ? "/denoiser_palette.pmdm"
                                                                   : "/denoiser.pmdm");
            pmdm::run_train_diffusion(cfg, data_dir, est_ckpt, ckpt, resume);
        } else if (smp->parsed()) {
            if (den_ckpt.empty() || est_ckpt.empty())
                throw CLI::ValidationError("sample needs --denoiser and --estimator");
            pmdm::run_sample(data_dir, den_ckpt, est_ckpt, out_dir, split, n_samples, cfg.seed,
                             cfg.threads);
        } else if (est->parsed()) {
            if (est_ckpt.empty()) throw CLI::ValidationError("estimate needs --estimator");
            pmdm::run_estimator_predict(data_dir, est_ckpt, out_dir, split);
        } else if (bas->parsed()) {
            pmdm::run_baseline(cfg, data_dir, method, out_dir, split);
        } else if (evl->parsed()) {
            pmdm::EvaluateOptions opts;
            opts.split = split;
            opts.means_dir = means_dir;
            opts.samples_dir = samples_dir;
            opts.montages = !no_montage;
            for (const auto& spec : pred_dirs) {
                const auto eq = spec.find('=');
                if (eq == std::string::npos)
                    throw CLI::ValidationError("--pred expects label=dir, got '" + spec + "'");
                opts.methods.push_back({spec.substr(0, eq), spec.substr(eq + 1)});
            }
            pmdm::run_evaluate(data_dir, opts, out_dir);
        }
    } catch (const CLI::Error& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return 1;
    } catch (const pmdm::NumericError& e) {
        std::fprintf(stderr, "numeric failure: %s\n", e.what());
        return 3;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 0;
}
