#include "pmdm/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <sstream>

#include "pmdm/classical.hpp"
#include "pmdm/diffusion.hpp"
#include "pmdm/io.hpp"

namespace fs = std::filesystem;

namespace pmdm {

namespace {

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), f, v);
    return buf;
}

/// Stacks [1,1,H,W] slice tensors into one [K,1,H,W] batch.
Tensor stack_batch(const std::vector<Tensor>& pool, const std::vector<std::size_t>& order,
                   std::size_t lo, std::size_t hi) {
    Shape shape = pool.front().shape();
    shape[0] = static_cast<int>(hi - lo);
    const std::size_t per = pool.front().values().size();
    std::vector<float> data(per * (hi - lo));
    for (std::size_t i = lo; i < hi; ++i)
        std::copy(pool[order[i]].values().begin(), pool[order[i]].values().end(),
                  data.begin() + static_cast<std::ptrdiff_t>((i - lo) * per));
    return Tensor::from_data(shape, std::move(data));
}

ParamStore clone_values(const ParamStore& src) {
    ParamStore dst;
    for (const auto& [name, t] : src.entries()) dst.add(name, t.clone_detached(false));
    return dst;
}

void copy_values(const ParamStore& src, ParamStore& dst) {
    for (const auto& [name, t] : src.entries()) {
        Tensor& d = dst.at(name);
        if (d.shape() != t.shape()) throw DataError("checkpoint shape mismatch for " + name);
        d.values() = t.values();
    }
}

struct MeanStd {
    double mean = 0.0;
    double std_dev = 1.0;
};

MeanStd compute_stats(const std::vector<Tensor>& pool) {
    double acc = 0.0;
    std::size_t n = 0;
    for (const auto& t : pool) {
        for (float v : t.values()) acc += v;
        n += t.values().size();
    }
    MeanStd s;
    s.mean = acc / static_cast<double>(n);
    double var = 0.0;
    for (const auto& t : pool)
        for (float v : t.values()) {
            const double d = v - s.mean;
            var += d * d;
        }
    s.std_dev = std::sqrt(var / static_cast<double>(n));
    if (s.std_dev < 1e-6) s.std_dev = 1e-6;
    return s;
}

Tensor zscore(const Tensor& t, const MeanStd& s) {
    std::vector<float> data(t.values().size());
    const float m = static_cast<float>(s.mean);
    const float inv = static_cast<float>(1.0 / s.std_dev);
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = (t.values()[i] - m) * inv;
    return Tensor::from_data(t.shape(), std::move(data));
}

void write_kv(std::ostringstream& ss, const std::string& k, const std::string& v) {
    ss << k << "=" << v << "\n";
}

std::string require(const std::map<std::string, std::string>& kv, const std::string& key,
                    const std::string& context) {
    auto it = kv.find(key);
    if (it == kv.end()) throw DataError(context + ": missing key '" + key + "'");
    return it->second;
}

int resolve_subsets(const RunConfig& cfg, const char* who) {
    int subsets = cfg.recon_subsets;
    if (subsets < 1) subsets = 1;
    if (cfg.n_angles % subsets != 0) {
        int fallback = 1;
        for (int s = std::min(subsets, cfg.n_angles); s >= 1; --s)
            if (cfg.n_angles % s == 0) {
                fallback = s;
                break;
            }
        std::fprintf(stderr, "[%s] warning: %d subsets do not divide %d angles, using %d\n", who,
                     subsets, cfg.n_angles, fallback);
        subsets = fallback;
    }
    return subsets;
}

constexpr const char* kManifestName = "manifest.tsv";

}  // namespace

std::map<std::string, std::string> parse_kv(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        std::string key = line.substr(0, eq);
        std::string value = line.substr(eq + 1);
        while (!key.empty() && (key.back() == ' ' || key.back() == '\t')) key.pop_back();
        while (!value.empty() && (value.back() == ' ' || value.back() == '\t' || value.back() == '\r'))
            value.pop_back();
        kv[key] = value;
    }
    return kv;
}

double sino_norm_scale(const Sinogram& sino) {
    const double mean = sino.sum() / static_cast<double>(sino.size());
    return std::max(mean, 1e-12);
}

Tensor sino_to_input(const Sinogram& sino, int grid, double scale) {
    if (sino.n_bins > grid || sino.n_angles > grid)
        throw DataError("sinogram " + std::to_string(sino.n_bins) + "x" +
                        std::to_string(sino.n_angles) + " does not fit the network grid " +
                        std::to_string(grid));
    std::vector<float> padded = pad_to_square(sino.data, sino.n_bins, sino.n_angles, grid);
    const float inv = static_cast<float>(1.0 / scale);
    for (auto& v : padded) v *= inv;
    return Tensor::from_data({1, 1, grid, grid}, std::move(padded));
}

std::string slice_stem(const ManifestRecord& rec) {
    // Stable identity: phantom id plus the augmentation slot recovered from
    // the image file name (paths keep the a%02d suffix).
    const auto pos = rec.image_path.rfind("_a");
    std::string aug = "00";
    if (pos != std::string::npos && pos + 3 < rec.image_path.size())
        aug = rec.image_path.substr(pos + 2, 2);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "p%03d_a%s", rec.phantom_id, aug.c_str());
    return buf;
}

std::vector<LoadedSlice> load_slices(const std::string& data_dir, const Manifest& manifest,
                                     const std::string& split, int grid) {
    std::vector<LoadedSlice> out;
    for (const auto& rec : manifest.records) {
        if (rec.split != split) continue;
        LoadedSlice s;
        s.rec = rec;
        s.ref = load_pimg((fs::path(data_dir) / rec.image_path).string());
        if (rec.sino_path == "-") throw DataError("manifest row for " + rec.image_path + " has no sinogram");
        s.sino = load_psin((fs::path(data_dir) / rec.sino_path).string());
        if (s.ref.width != grid || s.ref.height != grid)
            throw DataError("reference image is " + std::to_string(s.ref.width) + "x" +
                            std::to_string(s.ref.height) + ", expected grid " + std::to_string(grid));
        s.scale = sino_norm_scale(s.sino);
        s.input = sino_to_input(s.sino, grid, s.scale);
        std::vector<float> tgt(s.ref.values.size());
        const float inv = static_cast<float>(1.0 / s.scale);
        for (std::size_t i = 0; i < tgt.size(); ++i) tgt[i] = s.ref.values[i] * inv;
        s.target = Tensor::from_data({1, 1, grid, grid}, std::move(tgt));
        out.push_back(std::move(s));
    }
    if (out.empty()) throw DataError("no '" + split + "' slices in manifest");
    return out;
}

// ---------------------------------------------------------------------------
// simulate

void run_simulate(const RunConfig& cfg, const std::string& out_dir) {
    cfg.validate();
    set_projector_threads(cfg.threads);
    const SystemModel sys = cfg.system_model();
    ReconConfig recon = cfg.recon_config();
    recon.subsets = resolve_subsets(cfg, "simulate");

    fs::create_directories(fs::path(out_dir) / "phantoms");
    fs::create_directories(fs::path(out_dir) / "images");
    fs::create_directories(fs::path(out_dir) / "sinos");

    const DatasetSpec dspec = cfg.dataset_spec();
    std::vector<ManifestRecord> plan = plan_dataset(dspec);
    Manifest manifest;
    const Rng counts_base = Rng(cfg.seed).split("counts");
    for (std::size_t idx = 0; idx < plan.size(); ++idx) {
        ManifestRecord rec = plan[idx];
        const int aug = static_cast<int>(idx) % cfg.augment_per_phantom;
        const ImageGrid phantom = render_sample(dspec, rec);
        save_pimg((fs::path(out_dir) / rec.image_path).string(), phantom);

        Rng slice_rng = counts_base.split_index(static_cast<std::uint64_t>(rec.phantom_id))
                            .split_index(static_cast<std::uint64_t>(aug));
        const ReferencePair pair = make_reference(phantom, sys, slice_rng, recon, cfg.ref_count_factor);

        char ref_name[64], sino_name[64];
        std::snprintf(ref_name, sizeof(ref_name), "images/ref_p%03d_a%02d.pimg", rec.phantom_id, aug);
        std::snprintf(sino_name, sizeof(sino_name), "sinos/train_p%03d_a%02d.psin", rec.phantom_id, aug);
        save_pimg((fs::path(out_dir) / ref_name).string(), pair.reference);
        save_psin((fs::path(out_dir) / sino_name).string(), pair.train_counts);

        rec.image_path = ref_name;
        rec.sino_path = sino_name;
        manifest.records.push_back(std::move(rec));
    }
    save_manifest((fs::path(out_dir) / kManifestName).string(), manifest);
    cfg.save((fs::path(out_dir) / "config.txt").string());
    std::printf("[simulate] wrote %zu slices (%d phantoms x %d angles) to %s\n",
                manifest.records.size(), cfg.n_phantoms, cfg.augment_per_phantom, out_dir.c_str());
}

// ---------------------------------------------------------------------------
// estimator training

void run_train_estimator(const RunConfig& cfg, const std::string& data_dir,
                         const std::string& ckpt_path) {
    cfg.validate();
    set_projector_threads(cfg.threads);
    const Manifest manifest = load_manifest((fs::path(data_dir) / kManifestName).string());
    const auto train = load_slices(data_dir, manifest, "train", cfg.grid_size);
    const auto val = load_slices(data_dir, manifest, "val", cfg.grid_size);

    const EstimatorConfig net_cfg = cfg.estimator_config();
    Rng init_rng = Rng(cfg.seed).split("estimator-init");
    ParamStore params = init_estimator(net_cfg, init_rng);
    std::printf("[train-estimator] %lld trainable parameters\n",
                static_cast<long long>(params.trainable_count()));

    std::vector<Tensor> train_in, train_tgt, val_in, val_tgt;
    for (const auto& s : train) {
        train_in.push_back(s.input);
        train_tgt.push_back(s.target);
    }
    for (const auto& s : val) {
        val_in.push_back(s.input);
        val_tgt.push_back(s.target);
    }

    AdamConfig adam;
    adam.lr = cfg.est_lr;
    adam.weight_decay = cfg.est_weight_decay;

    Rng rng = Rng(cfg.seed).split("train-estimator");
    std::vector<std::size_t> order(train_in.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<std::size_t> vorder(val_in.size());
    std::iota(vorder.begin(), vorder.end(), std::size_t{0});

    double best_val = std::numeric_limits<double>::infinity();
    int best_epoch = -1;
    ParamStore best;

    auto eval_val = [&]() {
        double sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t lo = 0; lo < vorder.size(); lo += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t hi = std::min(vorder.size(), lo + static_cast<std::size_t>(cfg.batch_size));
            Tensor in = stack_batch(val_in, vorder, lo, hi);
            Tensor tgt = stack_batch(val_tgt, vorder, lo, hi);
            Tensor pred = estimator_forward(params, net_cfg, in, false);
            sum += ops::mse(pred, tgt).item();
            ++batches;
        }
        return sum / static_cast<double>(std::max<std::size_t>(batches, 1));
    };

    for (int epoch = 0; epoch < cfg.est_epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<std::size_t>(rng.below(i))]);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t lo = 0; lo < order.size(); lo += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t hi = std::min(order.size(), lo + static_cast<std::size_t>(cfg.batch_size));
            Tensor in = stack_batch(train_in, order, lo, hi);
            Tensor tgt = stack_batch(train_tgt, order, lo, hi);
            params.zero_grad();
            Tensor pred = estimator_forward(params, net_cfg, in, true);
            Tensor loss = ops::mse(pred, tgt);
            if (!loss.all_finite()) throw NumericError("estimator training diverged (non-finite loss)");
            loss.backward();
            adam_step(params, adam);
            loss_sum += loss.item();
            ++batches;
        }
        const double train_mse = loss_sum / static_cast<double>(std::max<std::size_t>(batches, 1));
        const double val_mse = eval_val();
        std::printf("[train-estimator] epoch %3d  train %.6f  val %.6f\n", epoch, train_mse, val_mse);
        if (val_mse < best_val) {
            best_val = val_mse;
            best_epoch = epoch;
            best = clone_values(params);
        }
    }

    save_params(ckpt_path, best);
    std::ostringstream meta;
    write_kv(meta, "kind", "estimator");
    write_kv(meta, "grid_size", std::to_string(net_cfg.grid_size));
    write_kv(meta, "base_width", std::to_string(net_cfg.base_width));
    write_kv(meta, "best_epoch", std::to_string(best_epoch));
    write_kv(meta, "best_val_mse", fmt("%.17g", best_val));
    write_text_file(ckpt_path + ".meta", meta.str());
    std::printf("[train-estimator] best epoch %d (val %.6f) -> %s\n", best_epoch, best_val,
                ckpt_path.c_str());
}

namespace {

struct EstimatorCheckpoint {
    EstimatorConfig cfg;
    ParamStore params;
};

EstimatorCheckpoint load_estimator_ckpt(const std::string& ckpt_path) {
    EstimatorCheckpoint out;
    const auto kv = parse_kv(read_text_file(ckpt_path + ".meta"));
    if (require(kv, "kind", ckpt_path) != "estimator")
        throw DataError(ckpt_path + " is not an estimator checkpoint");
    out.cfg.grid_size = std::stoi(require(kv, "grid_size", ckpt_path));
    out.cfg.base_width = std::stoi(require(kv, "base_width", ckpt_path));
    Rng dummy(0);
    out.params = init_estimator(out.cfg, dummy);
    copy_values(load_params(ckpt_path), out.params);
    return out;
}

/// Frozen stage-1 predictions for a list of slices (eval mode, batch 1).
std::vector<Tensor> posterior_means(EstimatorCheckpoint& est, const std::vector<LoadedSlice>& slices) {
    std::vector<Tensor> out;
    out.reserve(slices.size());
    for (const auto& s : slices)
        out.push_back(estimator_forward(est.params, est.cfg, s.input, false).clone_detached());
    return out;
}

struct DenoiserCheckpoint {
    DenoiserConfig net;
    DiffusionConfig diff;
    NoiseSchedule sched;
    ParamStore params;
    MeanStd data_stats, cond_stats;
    int epoch = 0;
    std::string rng_state;
    std::string tag;
};

void save_denoiser_ckpt(const std::string& path, const DenoiserCheckpoint& ck) {
    save_params(path, ck.params);
    std::ostringstream meta;
    write_kv(meta, "kind", "denoiser");
    write_kv(meta, "grid_size", std::to_string(ck.net.grid_size));
    write_kv(meta, "base_width", std::to_string(ck.net.base_width));
    write_kv(meta, "levels", std::to_string(ck.net.levels));
    write_kv(meta, "temb_dim", std::to_string(ck.net.temb_dim));
    write_kv(meta, "T", std::to_string(ck.diff.T));
    write_kv(meta, "beta_min", fmt("%.17g", ck.diff.beta_min));
    write_kv(meta, "beta_max", fmt("%.17g", ck.diff.beta_max));
    write_kv(meta, "sigma_mode",
             ck.diff.sigma_mode == DiffusionConfig::SigmaMode::Beta ? "beta" : "beta_tilde");
    write_kv(meta, "condition",
             ck.diff.conditioning == DiffusionConfig::Conditioning::PosteriorMean ? "posterior_mean"
                                                                                  : "sinogram");
    write_kv(meta, "schedule_hash", ck.sched.hash_hex());
    write_kv(meta, "data_mean", fmt("%.17g", ck.data_stats.mean));
    write_kv(meta, "data_std", fmt("%.17g", ck.data_stats.std_dev));
    write_kv(meta, "cond_mean", fmt("%.17g", ck.cond_stats.mean));
    write_kv(meta, "cond_std", fmt("%.17g", ck.cond_stats.std_dev));
    write_kv(meta, "epoch", std::to_string(ck.epoch));
    write_kv(meta, "rng_state", ck.rng_state);
    if (!ck.tag.empty()) write_kv(meta, "tag", ck.tag);
    write_text_file(path + ".meta", meta.str());
}

DenoiserCheckpoint load_denoiser_ckpt(const std::string& path) {
    DenoiserCheckpoint ck;
    const auto kv = parse_kv(read_text_file(path + ".meta"));
    if (require(kv, "kind", path) != "denoiser") throw DataError(path + " is not a denoiser checkpoint");
    ck.net.grid_size = std::stoi(require(kv, "grid_size", path));
    ck.net.base_width = std::stoi(require(kv, "base_width", path));
    ck.net.levels = std::stoi(require(kv, "levels", path));
    ck.net.temb_dim = std::stoi(require(kv, "temb_dim", path));
    ck.diff.T = std::stoi(require(kv, "T", path));
    ck.diff.beta_min = std::stod(require(kv, "beta_min", path));
    ck.diff.beta_max = std::stod(require(kv, "beta_max", path));
    ck.diff.sigma_mode = require(kv, "sigma_mode", path) == "beta"
                             ? DiffusionConfig::SigmaMode::Beta
                             : DiffusionConfig::SigmaMode::BetaTilde;
    ck.diff.conditioning = require(kv, "condition", path) == "posterior_mean"
                               ? DiffusionConfig::Conditioning::PosteriorMean
                               : DiffusionConfig::Conditioning::Sinogram;
    ck.sched = make_schedule(ck.diff);
    if (ck.sched.hash_hex() != require(kv, "schedule_hash", path))
        throw DataError(path + ": schedule hash mismatch, checkpoint and config disagree");
    ck.data_stats.mean = std::stod(require(kv, "data_mean", path));
    ck.data_stats.std_dev = std::stod(require(kv, "data_std", path));
    ck.cond_stats.mean = std::stod(require(kv, "cond_mean", path));
    ck.cond_stats.std_dev = std::stod(require(kv, "cond_std", path));
    ck.epoch = std::stoi(require(kv, "epoch", path));
    ck.rng_state = require(kv, "rng_state", path);
    auto tag = kv.find("tag");
    if (tag != kv.end()) ck.tag = tag->second;
    Rng dummy(0);
    ck.params = init_denoiser(ck.net, dummy);
    ParamStore loaded = load_params(path);
    copy_values(loaded, ck.params);
    ck.params.adam = std::move(loaded.adam);
    return ck;
}

}  // namespace

void run_train_diffusion(const RunConfig& cfg, const std::string& data_dir,
                         const std::string& estimator_ckpt, const std::string& ckpt_path,
                         const std::string& resume_from) {
    cfg.validate();
    set_projector_threads(cfg.threads);
    const Manifest manifest = load_manifest((fs::path(data_dir) / kManifestName).string());
    const auto train = load_slices(data_dir, manifest, "train", cfg.grid_size);
    const auto val = load_slices(data_dir, manifest, "val", cfg.grid_size);

    EstimatorCheckpoint est = load_estimator_ckpt(estimator_ckpt);
    if (est.cfg.grid_size != cfg.grid_size)
        throw DataError("estimator checkpoint grid " + std::to_string(est.cfg.grid_size) +
                        " != config grid " + std::to_string(cfg.grid_size));

    const DiffusionConfig diff_cfg = cfg.diffusion_config();
    const bool palette = diff_cfg.conditioning == DiffusionConfig::Conditioning::Sinogram;

    // Conditions are a one-time precomputation with the estimator frozen.
    std::vector<Tensor> train_cond_raw, val_cond_raw;
    if (palette) {
        for (const auto& s : train) train_cond_raw.push_back(s.input);
        for (const auto& s : val) val_cond_raw.push_back(s.input);
    } else {
        train_cond_raw = posterior_means(est, train);
        val_cond_raw = posterior_means(est, val);
    }
    std::vector<Tensor> train_tgt_raw, val_tgt_raw;
    for (const auto& s : train) train_tgt_raw.push_back(s.target);
    for (const auto& s : val) val_tgt_raw.push_back(s.target);

    DenoiserCheckpoint ck;
    ck.net = cfg.denoiser_config();
    ck.diff = diff_cfg;
    ck.sched = make_schedule(diff_cfg);
    ck.tag = palette ? "palette-ablation" : "";

    Rng rng = Rng(cfg.seed).split("train-diffusion");
    int start_epoch = 0;
    if (resume_from.empty()) {
        ck.data_stats = compute_stats(train_tgt_raw);
        ck.cond_stats = compute_stats(train_cond_raw);
        Rng init_rng = Rng(cfg.seed).split("denoiser-init");
        ck.params = init_denoiser(ck.net, init_rng);
    } else {
        DenoiserCheckpoint prev = load_denoiser_ckpt(resume_from);
        if (prev.sched.hash_hex() != ck.sched.hash_hex())
            throw DataError("resume checkpoint schedule differs from config schedule");
        ck = std::move(prev);
        rng = Rng::from_state_hex(ck.rng_state);
        start_epoch = ck.epoch + 1;
    }
    std::printf("[train-diffusion] %lld trainable parameters%s\n",
                static_cast<long long>(ck.params.trainable_count()),
                palette ? " (palette-ablation conditioning)" : "");

    auto z_all = [](const std::vector<Tensor>& pool, const MeanStd& s) {
        std::vector<Tensor> out;
        out.reserve(pool.size());
        for (const auto& t : pool) out.push_back(zscore(t, s));
        return out;
    };
    const std::vector<Tensor> train_r0 = z_all(train_tgt_raw, ck.data_stats);
    const std::vector<Tensor> val_r0 = z_all(val_tgt_raw, ck.data_stats);
    const std::vector<Tensor> train_cond = z_all(train_cond_raw, ck.cond_stats);
    const std::vector<Tensor> val_cond = z_all(val_cond_raw, ck.cond_stats);

    AdamConfig adam;
    adam.lr = cfg.diff_lr;

    const int remaining = cfg.diff_epochs - start_epoch;
    if (remaining <= 0) {
        std::printf("[train-diffusion] checkpoint already at epoch %d, nothing to do\n", ck.epoch);
        save_denoiser_ckpt(ckpt_path, ck);
        return;
    }
    train_diffusion_epochs(
        ck.params, ck.net, ck.sched, train_r0, train_cond, val_r0, val_cond, remaining,
        cfg.batch_size, adam, rng,
        [&](const EpochStats& st) {
            std::printf("[train-diffusion] epoch %3d  train %.6f  val %.6f\n", st.epoch,
                        st.train_loss, st.val_loss);
            ck.epoch = st.epoch;
            ck.rng_state = rng.state_hex();
            save_denoiser_ckpt(ckpt_path, ck);
        },
        start_epoch);
    std::printf("[train-diffusion] done -> %s\n", ckpt_path.c_str());
}

// ---------------------------------------------------------------------------
// sampling / prediction

void run_sample(const std::string& data_dir, const std::string& denoiser_ckpt,
                const std::string& estimator_ckpt, const std::string& out_dir,
                const std::string& split, int n_samples, std::uint64_t seed, int threads) {
    if (n_samples < 1) throw std::invalid_argument("n_samples must be >= 1");
    set_projector_threads(threads);
    DenoiserCheckpoint ck = load_denoiser_ckpt(denoiser_ckpt);
    EstimatorCheckpoint est = load_estimator_ckpt(estimator_ckpt);
    if (est.cfg.grid_size != ck.net.grid_size)
        throw DataError("estimator and denoiser checkpoints disagree on grid size");
    const Manifest manifest = load_manifest((fs::path(data_dir) / kManifestName).string());
    const auto slices = load_slices(data_dir, manifest, split, ck.net.grid_size);

    fs::create_directories(out_dir);
    const bool palette = ck.diff.conditioning == DiffusionConfig::Conditioning::Sinogram;
    EpsPredictor predictor = make_denoiser_predictor(ck.params, ck.net);
    const Rng base = Rng(seed).split("sample");

    for (const auto& s : slices) {
        const Tensor mean_pred = estimator_forward(est.params, est.cfg, s.input, false);
        const Tensor cond = zscore(palette ? s.input : mean_pred, ck.cond_stats);
        for (int k = 0; k < n_samples; ++k) {
            Rng rng = base.split(slice_stem(s.rec)).split_index(static_cast<std::uint64_t>(k));
            const SampleResult res = sample(predictor, cond, ck.sched, rng);
            ImageGrid img(ck.net.grid_size, ck.net.grid_size, s.ref.pixel_size_mm);
            for (std::size_t i = 0; i < img.values.size(); ++i) {
                const double z = res.raw.values()[i];
                const double v = (z * ck.data_stats.std_dev + ck.data_stats.mean) * s.scale;
                img.values[i] = static_cast<float>(std::max(v, 0.0));
            }
            std::string stem = "pred_" + slice_stem(s.rec) + (k == 0 ? "" : "_s" + std::to_string(k));
            save_pimg((fs::path(out_dir) / (stem + ".pimg")).string(), img);
            save_pgm((fs::path(out_dir) / (stem + ".pgm")).string(), img.values.data(), img.height,
                     img.width, 0.0f, std::max(img.max_value(), 1e-12f));
        }
    }
    std::printf("[sample] wrote %zu slices x %d samples to %s\n", slices.size(), n_samples,
                out_dir.c_str());
}

void run_estimator_predict(const std::string& data_dir, const std::string& estimator_ckpt,
                           const std::string& out_dir, const std::string& split) {
    EstimatorCheckpoint est = load_estimator_ckpt(estimator_ckpt);
    const Manifest manifest = load_manifest((fs::path(data_dir) / kManifestName).string());
    const auto slices = load_slices(data_dir, manifest, split, est.cfg.grid_size);
    fs::create_directories(out_dir);
    for (const auto& s : slices) {
        const Tensor pred = estimator_forward(est.params, est.cfg, s.input, false);
        ImageGrid img(est.cfg.grid_size, est.cfg.grid_size, s.ref.pixel_size_mm);
        for (std::size_t i = 0; i < img.values.size(); ++i)
            img.values[i] = static_cast<float>(std::max(pred.values()[i] * s.scale, 0.0));
        const std::string stem = "pred_" + slice_stem(s.rec);
        save_pimg((fs::path(out_dir) / (stem + ".pimg")).string(), img);
        save_pgm((fs::path(out_dir) / (stem + ".pgm")).string(), img.values.data(), img.height,
                 img.width, 0.0f, std::max(img.max_value(), 1e-12f));
    }
    std::printf("[estimator-predict] wrote %zu slices to %s\n", slices.size(), out_dir.c_str());
}

void run_baseline(const RunConfig& cfg, const std::string& data_dir, const std::string& method,
                  const std::string& out_dir, const std::string& split) {
    cfg.validate();
    set_projector_threads(cfg.threads);
    const SystemModel sys = cfg.system_model();
    const Manifest manifest = load_manifest((fs::path(data_dir) / kManifestName).string());
    const auto slices = load_slices(data_dir, manifest, split, cfg.grid_size);
    fs::create_directories(out_dir);
    const int subsets = resolve_subsets(cfg, "baseline");

    for (const auto& s : slices) {
        if (s.sino.n_bins != sys.n_bins || s.sino.n_angles != sys.n_angles)
            throw DataError("sinogram geometry does not match the configured system model");
        ImageGrid rec;
        if (method == "fbp")
            rec = fbp(s.sino, sys, cfg.grid_size);
        else if (method == "mlem")
            rec = mlem(s.sino, sys, cfg.grid_size, cfg.recon_iterations);
        else if (method == "osem")
            rec = osem(s.sino, sys, cfg.grid_size, cfg.recon_iterations, subsets);
        else
            throw std::invalid_argument("unknown method '" + method + "' (fbp|mlem|osem)");
        const std::string stem = "pred_" + slice_stem(s.rec);
        save_pimg((fs::path(out_dir) / (stem + ".pimg")).string(), rec);
        save_pgm((fs::path(out_dir) / (stem + ".pgm")).string(), rec.values.data(), rec.height,
                 rec.width, 0.0f, std::max(rec.max_value(), 1e-12f));
    }
    std::printf("[baseline] %s on %zu slices -> %s\n", method.c_str(), slices.size(), out_dir.c_str());
}

// ---------------------------------------------------------------------------
// evaluation

namespace {

double mean_of(const std::vector<double>& v) {
    double acc = 0.0;
    for (double x : v) acc += x;
    return acc / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v, double mean) {
    if (!std::isfinite(mean)) return 0.0;
    double acc = 0.0;
    for (double x : v) acc += (x - mean) * (x - mean);
    return std::sqrt(acc / static_cast<double>(v.size()));
}

std::string metric_str(double v, const char* f) {
    if (std::isinf(v)) return "inf";
    return fmt(f, v);
}

}  // namespace

EvaluationReport run_evaluate(const std::string& data_dir, const EvaluateOptions& opts,
                              const std::string& out_dir) {
    if (opts.methods.empty()) throw std::invalid_argument("evaluate: no prediction directories given");
    const Manifest manifest = load_manifest((fs::path(data_dir) / kManifestName).string());
    std::vector<const ManifestRecord*> rows = manifest.in_split(opts.split);
    if (rows.empty()) throw DataError("no '" + opts.split + "' slices in manifest");
    fs::create_directories(out_dir);

    std::vector<ImageGrid> refs;
    std::vector<Sinogram> sinos;
    for (const auto* rec : rows) {
        refs.push_back(load_pimg((fs::path(data_dir) / rec->image_path).string()));
        sinos.push_back(load_psin((fs::path(data_dir) / rec->sino_path).string()));
    }

    EvaluationReport report;
    std::vector<std::vector<ImageGrid>> preds(opts.methods.size());
    for (std::size_t m = 0; m < opts.methods.size(); ++m) {
        MethodSummary sum;
        sum.label = opts.methods[m].label;
        for (std::size_t i = 0; i < rows.size(); ++i) {
            const std::string path =
                (fs::path(opts.methods[m].dir) / ("pred_" + slice_stem(*rows[i]) + ".pimg")).string();
            ImageGrid pred = load_pimg(path);
            if (pred.width != refs[i].width || pred.height != refs[i].height)
                throw DataError(path + ": prediction shape differs from reference");
            sum.psnr.push_back(psnr(refs[i], pred));
            sum.ssim.push_back(ssim(refs[i], pred));
            sum.nrmse.push_back(nrmse(refs[i], pred));
            preds[m].push_back(std::move(pred));
        }
        sum.psnr_mean = mean_of(sum.psnr);
        sum.psnr_std = std_of(sum.psnr, sum.psnr_mean);
        sum.ssim_mean = mean_of(sum.ssim);
        sum.ssim_std = std_of(sum.ssim, sum.ssim_mean);
        sum.nrmse_mean = mean_of(sum.nrmse);
        report.methods.push_back(std::move(sum));
    }

    // Machine-readable table.
    std::ostringstream tsv;
    tsv << "#method\tslice\tpsnr_db\tssim\tnrmse\taggregate\n";
    for (const auto& m : report.methods) {
        for (std::size_t i = 0; i < rows.size(); ++i)
            tsv << m.label << '\t' << slice_stem(*rows[i]) << '\t' << metric_str(m.psnr[i], "%.4f")
                << '\t' << metric_str(m.ssim[i], "%.6f") << '\t' << metric_str(m.nrmse[i], "%.6f")
                << "\t0\n";
        tsv << m.label << "\tALL\t" << metric_str(m.psnr_mean, "%.4f") << '\t'
            << metric_str(m.ssim_mean, "%.6f") << '\t' << metric_str(m.nrmse_mean, "%.6f") << "\t1\n";
    }

    // Human-readable table, methods in command-line order.
    std::ostringstream txt;
    txt << "Method                        PSNR (dB)          SSIM               NRMSE\n";
    txt << "------------------------------------------------------------------------\n";
    for (const auto& m : report.methods) {
        char line[160];
        std::snprintf(line, sizeof(line), "%-28s  %8s +/- %-6s  %8s +/- %-6s  %8s\n", m.label.c_str(),
                      metric_str(m.psnr_mean, "%.2f").c_str(), metric_str(m.psnr_std, "%.2f").c_str(),
                      metric_str(m.ssim_mean, "%.4f").c_str(), metric_str(m.ssim_std, "%.4f").c_str(),
                      metric_str(m.nrmse_mean, "%.4f").c_str());
        txt << line;
    }

    if (!opts.means_dir.empty() && !opts.samples_dir.empty()) {
        std::vector<ImageGrid> means, samples;
        for (const auto* rec : rows) {
            means.push_back(load_pimg((fs::path(opts.means_dir) / ("pred_" + slice_stem(*rec) + ".pimg")).string()));
            samples.push_back(
                load_pimg((fs::path(opts.samples_dir) / ("pred_" + slice_stem(*rec) + ".pimg")).string()));
        }
        report.decomposition = decomposition_report(refs, means, samples);
        report.has_decomposition = true;
        const auto& d = report.decomposition;
        txt << "\nDistortion decomposition (squared 2-norms, test-set averages)\n";
        txt << "  E||r0 - mean||^2      = " << fmt("%.6g", d.d_star) << "\n";
        txt << "  E||mean - sample||^2  = " << fmt("%.6g", d.transport) << "\n";
        txt << "  E||r0 - sample||^2    = " << fmt("%.6g", d.total) << "\n";
        txt << "  relative residual     = " << fmt("%.6g", d.residual) << "\n";
        tsv << "#decomposition\td_star=" << fmt("%.17g", d.d_star)
            << "\ttransport=" << fmt("%.17g", d.transport) << "\ttotal=" << fmt("%.17g", d.total)
            << "\tresidual=" << fmt("%.17g", d.residual) << "\n";
    }

    write_text_file((fs::path(out_dir) / "report.tsv").string(), tsv.str());
    write_text_file((fs::path(out_dir) / "report.txt").string(), txt.str());
    std::printf("%s", txt.str().c_str());

    if (opts.montages) {
        // Side-by-side panels: input sinogram, reference, one panel per
        // method; second row carries the squared-error maps.
        for (std::size_t i = 0; i < rows.size(); ++i) {
            const int g = refs[i].width;
            const int cols = 2 + static_cast<int>(opts.methods.size());
            std::vector<float> canvas(static_cast<std::size_t>(2 * g) * (cols * g), 0.0f);
            auto blit = [&](const std::vector<float>& tile, int row, int col, float norm) {
                for (int y = 0; y < g; ++y)
                    for (int x = 0; x < g; ++x)
                        canvas[static_cast<std::size_t>(row * g + y) * (cols * g) + col * g + x] =
                            tile[static_cast<std::size_t>(y) * g + x] / norm;
            };
            const std::vector<float> sino_tile =
                pad_to_square(sinos[i].data, sinos[i].n_bins, sinos[i].n_angles, g);
            const float sino_peak = *std::max_element(sino_tile.begin(), sino_tile.end());
            blit(sino_tile, 0, 0, std::max(sino_peak, 1e-12f));
            const float ref_peak = std::max(refs[i].max_value(), 1e-12f);
            blit(refs[i].values, 0, 1, ref_peak);
            float err_peak = 1e-12f;
            std::vector<ImageGrid> errs;
            for (std::size_t m = 0; m < preds.size(); ++m) {
                errs.push_back(error_map(refs[i], preds[m][i]));
                err_peak = std::max(err_peak, errs.back().max_value());
            }
            for (std::size_t m = 0; m < preds.size(); ++m) {
                blit(preds[m][i].values, 0, 2 + static_cast<int>(m), ref_peak);
                blit(errs[m].values, 1, 2 + static_cast<int>(m), err_peak);
            }
            const std::string path =
                (fs::path(out_dir) / ("montage_" + slice_stem(*rows[i]) + ".pgm")).string();
            save_pgm(path, canvas.data(), 2 * g, cols * g, 0.0f, 1.0f);
        }
    }
    return report;
}

}  // namespace pmdm
