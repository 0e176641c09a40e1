#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "pmdm/io.hpp"
#include "pmdm/pipeline.hpp"

using namespace pmdm;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const char* tag) {
        path = fs::temp_directory_path() / (std::string("pmdm_pl_") + tag + "_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
    std::string str(const std::string& sub = "") const {
        return sub.empty() ? path.string() : (path / sub).string();
    }
};

RunConfig tiny_config() {
    RunConfig cfg;
    cfg.grid_size = 16;
    cfg.n_bins = 16;
    cfg.n_angles = 10;
    cfg.bin_spacing_mm = 3.0f;
    cfg.total_counts = 2e4;
    cfg.ref_count_factor = 20.0;
    cfg.recon_iterations = 4;
    cfg.recon_subsets = 2;
    cfg.n_phantoms = 4;
    cfg.augment_per_phantom = 2;
    cfg.split_train = 2;
    cfg.split_val = 1;
    cfg.split_test = 1;
    cfg.est_base_width = 8;
    cfg.est_epochs = 2;
    cfg.unet_base_width = 8;
    cfg.unet_levels = 2;
    cfg.temb_dim = 16;
    cfg.diff_T = 10;
    cfg.diff_beta_min = 1e-2;
    cfg.diff_beta_max = 0.3;
    cfg.diff_epochs = 2;
    cfg.seed = 777;
    return cfg;
}

std::string file_bytes(const std::string& path) { return read_text_file(path); }

}  // namespace

TEST_SUITE_BEGIN("pipeline");

TEST_CASE("config text round trip preserves every field") {
    RunConfig cfg = tiny_config();
    cfg.diff_condition = "sinogram";
    cfg.total_counts = 123456.75;
    const RunConfig back = RunConfig::from_text(cfg.to_text());
    CHECK(back.to_text() == cfg.to_text());
    CHECK(back.grid_size == 16);
    CHECK(back.diff_condition == "sinogram");
    CHECK(back.total_counts == 123456.75);

    CHECK_THROWS_AS(RunConfig::from_text("nonsense_key=3\n"), std::invalid_argument);
    const RunConfig commented = RunConfig::from_text("# a comment\n\ngrid_size = 32  # trailing\n");
    CHECK(commented.grid_size == 32);
}

TEST_CASE("config validation catches inconsistent setups") {
    RunConfig cfg = tiny_config();
    cfg.split_train = 3;  // 3+1+1 != 4
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = tiny_config();
    cfg.n_bins = 24;  // larger than grid, cannot pad
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = tiny_config();
    cfg.diff_sigma_mode = "bogus";
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("simulate is byte-identical across reruns and loads back cleanly") {
    const RunConfig cfg = tiny_config();
    TempDir a("sim_a"), b("sim_b");
    run_simulate(cfg, a.str());
    run_simulate(cfg, b.str());

    const Manifest ma = load_manifest(a.str("manifest.tsv"));
    CHECK(ma.records.size() == 8);
    CHECK(file_bytes(a.str("manifest.tsv")) == file_bytes(b.str("manifest.tsv")));
    for (const auto& rec : ma.records) {
        CHECK(file_bytes((fs::path(a.str()) / rec.image_path).string()) ==
              file_bytes((fs::path(b.str()) / rec.image_path).string()));
        CHECK(file_bytes((fs::path(a.str()) / rec.sino_path).string()) ==
              file_bytes((fs::path(b.str()) / rec.sino_path).string()));
    }
    // references and sinograms load with consistent geometry
    const auto slices = load_slices(a.str(), ma, "train", cfg.grid_size);
    CHECK(slices.size() == 4);
    for (const auto& s : slices) {
        CHECK(s.ref.max_value() > 0.0f);
        CHECK(s.sino.kind == Sinogram::Kind::Counts);
    }
    // persisted config reproduces the run configuration
    const RunConfig persisted = RunConfig::from_file(a.str("config.txt"));
    CHECK(persisted.to_text() == cfg.to_text());
}

TEST_CASE("estimator training writes a checkpoint that reloads bitwise") {
    const RunConfig cfg = tiny_config();
    TempDir dir("train_est");
    run_simulate(cfg, dir.str());
    const std::string ckpt = dir.str("estimator.pmdm");
    run_train_estimator(cfg, dir.str(), ckpt);
    CHECK(fs::exists(ckpt));
    CHECK(fs::exists(ckpt + ".meta"));

    // prediction determinism through a checkpoint round trip
    TempDir predA("pred_a"), predB("pred_b");
    run_estimator_predict(dir.str(), ckpt, predA.str(), "val");
    run_estimator_predict(dir.str(), ckpt, predB.str(), "val");
    const Manifest m = load_manifest(dir.str("manifest.tsv"));
    for (const auto* rec : m.in_split("val")) {
        const std::string name = "pred_" + slice_stem(*rec) + ".pimg";
        CHECK(file_bytes((fs::path(predA.str()) / name).string()) ==
              file_bytes((fs::path(predB.str()) / name).string()));
    }
}

TEST_CASE("diffusion training end to end: resume is bitwise, sampling works") {
    RunConfig cfg = tiny_config();
    TempDir dir("train_diff");
    run_simulate(cfg, dir.str());
    const std::string est = dir.str("estimator.pmdm");
    run_train_estimator(cfg, dir.str(), est);

    // one continuous 2-epoch run
    const std::string full = dir.str("denoiser_full.pmdm");
    run_train_diffusion(cfg, dir.str(), est, full);

    // 1 epoch, then resume for the second
    RunConfig one = cfg;
    one.diff_epochs = 1;
    const std::string part = dir.str("denoiser_part.pmdm");
    run_train_diffusion(one, dir.str(), est, part);
    RunConfig two = cfg;
    const std::string resumed = dir.str("denoiser_resumed.pmdm");
    run_train_diffusion(two, dir.str(), est, resumed, part);

    ParamStore w_full = load_params(full);
    ParamStore w_res = load_params(resumed);
    for (const auto& [name, t] : w_full.entries()) CHECK(t.values() == w_res.at(name).values());

    // sampling: stable names, reproducible with the same seed, distinct
    // posterior samples with --n-samples
    TempDir smpA("smp_a"), smpB("smp_b");
    run_sample(dir.str(), full, est, smpA.str(), "test", 2, 99, 1);
    run_sample(dir.str(), full, est, smpB.str(), "test", 2, 99, 1);
    const Manifest m = load_manifest(dir.str("manifest.tsv"));
    const auto test_rows = m.in_split("test");
    REQUIRE(test_rows.size() == 2);
    for (const auto* rec : test_rows) {
        const std::string s0 = "pred_" + slice_stem(*rec) + ".pimg";
        const std::string s1 = "pred_" + slice_stem(*rec) + "_s1.pimg";
        CHECK(file_bytes((fs::path(smpA.str()) / s0).string()) ==
              file_bytes((fs::path(smpB.str()) / s0).string()));
        const ImageGrid img0 = load_pimg((fs::path(smpA.str()) / s0).string());
        const ImageGrid img1 = load_pimg((fs::path(smpA.str()) / s1).string());
        double diff = 0.0;
        for (std::size_t i = 0; i < img0.values.size(); ++i)
            diff += std::fabs(static_cast<double>(img0.values[i]) - img1.values[i]);
        CHECK(diff > 0.0);
        for (float v : img0.values) CHECK(v >= 0.0f);
    }
}

TEST_CASE("sampler refuses a checkpoint whose schedule hash mismatches") {
    RunConfig cfg = tiny_config();
    TempDir dir("hash");
    run_simulate(cfg, dir.str());
    const std::string est = dir.str("estimator.pmdm");
    run_train_estimator(cfg, dir.str(), est);
    const std::string den = dir.str("denoiser.pmdm");
    run_train_diffusion(cfg, dir.str(), est, den);

    // tamper with the schedule fields but keep the stored hash
    std::string meta = read_text_file(den + ".meta");
    const auto pos = meta.find("T=10");
    REQUIRE(pos != std::string::npos);
    meta.replace(pos, 4, "T=11");
    write_text_file(den + ".meta", meta);
    TempDir smp("hash_smp");
    CHECK_THROWS_AS(run_sample(dir.str(), den, est, smp.str(), "test", 1, 1, 1), DataError);
}

TEST_CASE("palette ablation trains from the sinogram condition") {
    RunConfig cfg = tiny_config();
    cfg.diff_condition = "sinogram";
    TempDir dir("palette");
    run_simulate(cfg, dir.str());
    const std::string est = dir.str("estimator.pmdm");
    run_train_estimator(cfg, dir.str(), est);
    const std::string ckpt = dir.str("denoiser_palette.pmdm");
    run_train_diffusion(cfg, dir.str(), est, ckpt);
    const auto kv = parse_kv(read_text_file(ckpt + ".meta"));
    CHECK(kv.at("tag") == "palette-ablation");
    CHECK(kv.at("condition") == "sinogram");
}

TEST_CASE("baseline and evaluate produce reports and montages") {
    const RunConfig cfg = tiny_config();
    TempDir dir("eval");
    run_simulate(cfg, dir.str());
    TempDir fbp_dir("eval_fbp"), osem_dir("eval_osem"), copy_dir("eval_copy");
    run_baseline(cfg, dir.str(), "fbp", fbp_dir.str());
    run_baseline(cfg, dir.str(), "osem", osem_dir.str());
    CHECK_THROWS_AS(run_baseline(cfg, dir.str(), "sirt", fbp_dir.str()), std::invalid_argument);

    // reference copied as a fake method: sentinel metrics expected
    const Manifest m = load_manifest(dir.str("manifest.tsv"));
    for (const auto* rec : m.in_split("test")) {
        const ImageGrid ref = load_pimg((fs::path(dir.str()) / rec->image_path).string());
        save_pimg((fs::path(copy_dir.str()) / ("pred_" + slice_stem(*rec) + ".pimg")).string(), ref);
    }

    TempDir report("report");
    EvaluateOptions opts;
    opts.methods = {{"itself", copy_dir.str()}, {"fbp", fbp_dir.str()}, {"osem", osem_dir.str()}};
    opts.means_dir = copy_dir.str();
    opts.samples_dir = osem_dir.str();
    const EvaluationReport rep = run_evaluate(dir.str(), opts, report.str());

    REQUIRE(rep.methods.size() == 3);
    CHECK(rep.methods[0].label == "itself");  // ordering follows the request
    CHECK(std::isinf(rep.methods[0].psnr_mean));
    CHECK(rep.methods[0].ssim_mean == doctest::Approx(1.0));
    CHECK(rep.methods[0].nrmse_mean == doctest::Approx(0.0));
    CHECK(rep.has_decomposition);
    CHECK(rep.decomposition.d_star == doctest::Approx(0.0));

    CHECK(fs::exists(report.str("report.tsv")));
    CHECK(fs::exists(report.str("report.txt")));
    const std::string tsv = file_bytes(report.str("report.tsv"));
    CHECK(tsv.find("itself\tALL") != std::string::npos);
    CHECK(tsv.find("\t1\n") != std::string::npos);  // aggregate flag
    for (const auto* rec : m.in_split("test"))
        CHECK(fs::exists(report.str("montage_" + slice_stem(*rec) + ".pgm")));
}

TEST_SUITE_END();
