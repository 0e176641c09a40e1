#include "pmdm/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

namespace pmdm {

namespace op = pmdm::ops;

std::string NoiseSchedule::hash_hex() const {
    std::uint64_t h = 1469598103934665603ULL;
    auto feed = [&h](const void* p, std::size_t n) {
        const auto* bytes = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= bytes[i];
            h *= 1099511628211ULL;
        }
    };
    feed(&T, sizeof(T));
    feed(beta.data(), beta.size() * sizeof(double));
    feed(sigma.data(), sigma.size() * sizeof(double));
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

NoiseSchedule make_schedule(const DiffusionConfig& cfg) {
    if (cfg.T < 1) throw std::invalid_argument("schedule needs T >= 1");
    if (!(cfg.beta_min > 0.0) || !(cfg.beta_max < 1.0) || cfg.beta_min > cfg.beta_max)
        throw std::invalid_argument("schedule needs 0 < beta_min <= beta_max < 1");
    NoiseSchedule s;
    s.T = cfg.T;
    s.beta.resize(static_cast<std::size_t>(cfg.T));
    s.alpha.resize(s.beta.size());
    s.alpha_bar.resize(s.beta.size());
    s.sigma.resize(s.beta.size());
    double running = 1.0;
    for (int t = 0; t < cfg.T; ++t) {
        const double frac = cfg.T > 1 ? static_cast<double>(t) / (cfg.T - 1) : 0.0;
        const double beta = cfg.beta_min + (cfg.beta_max - cfg.beta_min) * frac;
        s.beta[static_cast<std::size_t>(t)] = beta;
        s.alpha[static_cast<std::size_t>(t)] = 1.0 - beta;
        const double prev_bar = running;
        running *= 1.0 - beta;
        s.alpha_bar[static_cast<std::size_t>(t)] = running;
        const double sigma2 = cfg.sigma_mode == DiffusionConfig::SigmaMode::Beta
                                  ? beta
                                  : beta * (1.0 - prev_bar) / (1.0 - running);
        s.sigma[static_cast<std::size_t>(t)] = std::sqrt(sigma2);
    }
    return s;
}

namespace {

void check_t(int t, const NoiseSchedule& sched) {
    if (t < 1 || t > sched.T)
        throw std::invalid_argument("timestep " + std::to_string(t) + " outside [1, " +
                                    std::to_string(sched.T) + "]");
}

}  // namespace

Tensor q_sample(const Tensor& r0, int t, const Tensor& eps, const NoiseSchedule& sched) {
    check_t(t, sched);
    if (r0.shape() != eps.shape()) throw std::invalid_argument("q_sample: eps shape mismatch");
    const float a = static_cast<float>(std::sqrt(sched.alpha_bar_at(t)));
    const float b = static_cast<float>(std::sqrt(1.0 - sched.alpha_bar_at(t)));
    std::vector<float> data(r0.values().size());
    const float* p0 = r0.data();
    const float* pe = eps.data();
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = a * p0[i] + b * pe[i];
    return Tensor::from_data(r0.shape(), std::move(data));
}

EpsPredictor make_denoiser_predictor(ParamStore& params, const DenoiserConfig& cfg) {
    return [&params, cfg](const Tensor& r_t, const std::vector<int>& t, const Tensor& cond) {
        return denoiser_forward(params, cfg, r_t, t, cond);
    };
}

Tensor p_sample_step_from_eps(const Tensor& r_t, int t, const Tensor& eps_hat,
                              const NoiseSchedule& sched, Rng& rng) {
    check_t(t, sched);
    if (r_t.shape() != eps_hat.shape())
        throw std::invalid_argument("p_sample_step: eps_hat shape mismatch");
    const double alpha = sched.alpha_at(t);
    const double beta = sched.beta_at(t);
    // beta == 0 makes the usual coefficient 0/0; the step is the identity.
    const double coef = beta > 0.0 ? beta / std::sqrt(1.0 - sched.alpha_bar_at(t)) : 0.0;
    const double inv_sqrt_alpha = 1.0 / std::sqrt(alpha);
    const float sigma = t > 1 ? static_cast<float>(sched.sigma_at(t)) : 0.0f;

    std::vector<float> data(r_t.values().size());
    const float* prt = r_t.data();
    const float* pe = eps_hat.data();
    for (std::size_t i = 0; i < data.size(); ++i)
        data[i] = static_cast<float>(inv_sqrt_alpha * (prt[i] - coef * pe[i]));
    if (sigma > 0.0f)
        for (auto& v : data) v += sigma * rng.normal();
    return Tensor::from_data(r_t.shape(), std::move(data));
}

Tensor p_sample_step(const EpsPredictor& predictor, const Tensor& r_t, int t, const Tensor& cond,
                     const NoiseSchedule& sched, Rng& rng) {
    check_t(t, sched);
    std::vector<int> ts(static_cast<std::size_t>(r_t.dim(0)), t);
    return p_sample_step_from_eps(r_t, t, predictor(r_t, ts, cond), sched, rng);
}

SampleResult sample(const EpsPredictor& predictor, const Tensor& cond, const NoiseSchedule& sched,
                    Rng& rng) {
    std::vector<float> init(cond.values().size());
    rng.fill_normal(init.data(), init.size());
    Tensor r = Tensor::from_data(cond.shape(), std::move(init));
    for (int t = sched.T; t >= 1; --t) r = p_sample_step(predictor, r, t, cond, sched, rng);
    SampleResult out;
    out.raw = r;
    Tensor clipped = r.clone_detached();
    for (auto& v : clipped.values()) v = std::max(v, 0.0f);
    out.value = clipped;
    return out;
}

Tensor training_loss(ParamStore& theta, const DenoiserConfig& net_cfg, const Tensor& r0,
                     const Tensor& cond, Rng& rng, const NoiseSchedule& sched) {
    if (r0.shape() != cond.shape()) throw std::invalid_argument("training_loss: shape mismatch");
    const int n = r0.dim(0);
    const std::size_t per = r0.values().size() / static_cast<std::size_t>(n);
    std::vector<int> ts(static_cast<std::size_t>(n));
    std::vector<float> eps(r0.values().size());
    std::vector<float> rt(r0.values().size());
    for (int i = 0; i < n; ++i) {
        const int t = static_cast<int>(rng.below(static_cast<std::uint64_t>(sched.T))) + 1;
        ts[static_cast<std::size_t>(i)] = t;
        const float a = static_cast<float>(std::sqrt(sched.alpha_bar_at(t)));
        const float b = static_cast<float>(std::sqrt(1.0 - sched.alpha_bar_at(t)));
        float* e = eps.data() + static_cast<std::size_t>(i) * per;
        rng.fill_normal(e, per);
        const float* p0 = r0.data() + static_cast<std::size_t>(i) * per;
        float* prt = rt.data() + static_cast<std::size_t>(i) * per;
        for (std::size_t j = 0; j < per; ++j) prt[j] = a * p0[j] + b * e[j];
    }
    Tensor r_t = Tensor::from_data(r0.shape(), std::move(rt));
    Tensor eps_t = Tensor::from_data(r0.shape(), std::move(eps));
    Tensor pred = denoiser_forward(theta, net_cfg, r_t, ts, cond);
    return op::mse(pred, eps_t);
}

void train_diffusion_epochs(ParamStore& theta, const DenoiserConfig& net_cfg,
                            const NoiseSchedule& sched, const std::vector<Tensor>& train_r0,
                            const std::vector<Tensor>& train_cond,
                            const std::vector<Tensor>& val_r0, const std::vector<Tensor>& val_cond,
                            int epochs, int batch_size, const AdamConfig& adam, Rng& rng,
                            const std::function<void(const EpochStats&)>& on_epoch,
                            int start_epoch) {
    if (train_r0.empty()) throw std::invalid_argument("train_diffusion: empty dataset");
    if (train_r0.size() != train_cond.size() || val_r0.size() != val_cond.size())
        throw std::invalid_argument("train_diffusion: misaligned dataset lists");
    if (batch_size < 1) throw std::invalid_argument("train_diffusion: batch_size must be >= 1");

    const auto& shape = train_r0.front().shape();
    auto stack = [&shape](const std::vector<Tensor>& pool, const std::vector<std::size_t>& idx,
                          std::size_t lo, std::size_t hi) {
        const std::size_t per = pool.front().values().size();
        Shape bshape = shape;
        bshape[0] = static_cast<int>(hi - lo);
        std::vector<float> data(per * (hi - lo));
        for (std::size_t i = lo; i < hi; ++i)
            std::copy(pool[idx[i]].values().begin(), pool[idx[i]].values().end(),
                      data.begin() + static_cast<std::ptrdiff_t>((i - lo) * per));
        return Tensor::from_data(bshape, std::move(data));
    };

    std::vector<std::size_t> order(train_r0.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    for (int e = 0; e < epochs; ++e) {
        // Fresh Fisher-Yates shuffle per epoch. Starting from the identity
        // makes the permutation a pure function of the rng state, which is
        // what lets a resumed run reproduce a continuous one bitwise.
        std::iota(order.begin(), order.end(), std::size_t{0});
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<std::size_t>(rng.below(i))]);

        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t lo = 0; lo < order.size(); lo += static_cast<std::size_t>(batch_size)) {
            const std::size_t hi = std::min(order.size(), lo + static_cast<std::size_t>(batch_size));
            Tensor r0 = stack(train_r0, order, lo, hi);
            Tensor cond = stack(train_cond, order, lo, hi);
            theta.zero_grad();
            Tensor loss = training_loss(theta, net_cfg, r0, cond, rng, sched);
            if (!loss.all_finite()) throw std::runtime_error("diffusion training diverged (non-finite loss)");
            loss.backward();
            adam_step(theta, adam);
            loss_sum += loss.item();
            ++batches;
        }

        EpochStats stats;
        stats.epoch = start_epoch + e;
        stats.train_loss = loss_sum / static_cast<double>(std::max<std::size_t>(batches, 1));
        if (!val_r0.empty()) {
            // Validation uses its own substream so it never perturbs training.
            Rng vrng = rng.split("val-loss").split_index(static_cast<std::uint64_t>(start_epoch + e));
            std::vector<std::size_t> vorder(val_r0.size());
            std::iota(vorder.begin(), vorder.end(), std::size_t{0});
            double vsum = 0.0;
            std::size_t vbatches = 0;
            for (std::size_t lo = 0; lo < vorder.size(); lo += static_cast<std::size_t>(batch_size)) {
                const std::size_t hi = std::min(vorder.size(), lo + static_cast<std::size_t>(batch_size));
                Tensor r0 = stack(val_r0, vorder, lo, hi);
                Tensor cond = stack(val_cond, vorder, lo, hi);
                Tensor loss = training_loss(theta, net_cfg, r0, cond, vrng, sched);
                vsum += loss.item();
                ++vbatches;
            }
            stats.val_loss = vsum / static_cast<double>(std::max<std::size_t>(vbatches, 1));
        }
        if (on_epoch) on_epoch(stats);
    }
}

}  // namespace pmdm
