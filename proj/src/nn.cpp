#include "pmdm/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace pmdm {

namespace {

namespace op = pmdm::ops;

void add_conv(ParamStore& P, const std::string& prefix, int in_ch, int out_ch, int k, Rng& rng,
              bool zero_init = false) {
    Tensor w = Tensor::zeros({out_ch, in_ch, k, k}, true);
    Tensor b = Tensor::zeros({out_ch}, true);
    if (!zero_init) {
        const int fan_in = in_ch * k * k;
        kaiming_uniform_fill(w, fan_in, rng);
        const float bound = 1.0f / std::sqrt(static_cast<float>(fan_in));
        for (auto& v : b.values()) v = bound * (2.0f * static_cast<float>(rng.uniform()) - 1.0f);
    }
    P.add(prefix + ".weight", std::move(w));
    P.add(prefix + ".bias", std::move(b));
}

void add_bn(ParamStore& P, const std::string& prefix, int ch) {
    P.add(prefix + ".gamma", Tensor::full({ch}, 1.0f, true));
    P.add(prefix + ".beta", Tensor::zeros({ch}, true));
    P.add(prefix + ".running_mean", Tensor::zeros({ch}, false));
    P.add(prefix + ".running_var", Tensor::full({ch}, 1.0f, false));
}

void add_gn(ParamStore& P, const std::string& prefix, int ch) {
    P.add(prefix + ".gamma", Tensor::full({ch}, 1.0f, true));
    P.add(prefix + ".beta", Tensor::zeros({ch}, true));
}

void add_linear(ParamStore& P, const std::string& prefix, int in_dim, int out_dim, Rng& rng) {
    Tensor w = Tensor::zeros({out_dim, in_dim}, true);
    kaiming_uniform_fill(w, in_dim, rng);
    Tensor b = Tensor::zeros({out_dim}, true);
    const float bound = 1.0f / std::sqrt(static_cast<float>(in_dim));
    for (auto& v : b.values()) v = bound * (2.0f * static_cast<float>(rng.uniform()) - 1.0f);
    P.add(prefix + ".weight", std::move(w));
    P.add(prefix + ".bias", std::move(b));
}

Tensor conv(ParamStore& P, const std::string& prefix, const Tensor& x, int stride) {
    const Tensor& w = P.at(prefix + ".weight");
    return op::conv2d(x, w, P.at(prefix + ".bias"), stride, w.dim(2) / 2);
}

Tensor conv_bn_act(ParamStore& P, const std::string& prefix, const Tensor& x, int stride,
                   bool training, bool smooth) {
    Tensor y = conv(P, prefix, x, stride);
    y = op::batch_norm2d(y, P.at(prefix + ".bn.gamma"), P.at(prefix + ".bn.beta"),
                         P.at(prefix + ".bn.running_mean"), P.at(prefix + ".bn.running_var"),
                         0.1f, 1e-5f, training);
    return smooth ? op::silu(y) : op::relu(y);
}

int pick_groups(int channels, int max_groups) {
    for (int g = std::min(channels, max_groups); g > 1; --g)
        if (channels % g == 0) return g;
    return 1;
}

struct EstimatorLayer {
    const char* name;
    int kernel;
    int stride;
    bool upsample_before;
    int width_mul_in, width_mul_out;  // multiples of base_width; 0 means 1 channel
};

// 10 conv layers: kernels step 7x7 -> 5x5 -> 3x3 through the encoder,
// stride-2 stages double the width, decoder halves it back.
constexpr EstimatorLayer kEstimatorLayers[] = {
    {"enc1", 7, 1, false, 0, 1}, {"enc2", 7, 2, false, 1, 2}, {"enc3", 5, 2, false, 2, 4},
    {"enc4", 5, 1, false, 4, 4}, {"enc5", 3, 2, false, 4, 8}, {"enc6", 3, 1, false, 8, 8},
    {"dec1", 3, 1, true, 8, 4},  {"dec2", 3, 1, true, 4, 2},  {"dec3", 3, 1, true, 2, 1},
    {"out", 3, 1, false, 1, 0},
};

}  // namespace

void kaiming_uniform_fill(Tensor& w, int fan_in, Rng& rng) {
    const float bound = std::sqrt(6.0f / static_cast<float>(fan_in));
    for (auto& v : w.values()) v = bound * (2.0f * static_cast<float>(rng.uniform()) - 1.0f);
}

ParamStore init_estimator(const EstimatorConfig& cfg, Rng& rng) {
    if (cfg.grid_size % 8 != 0 || cfg.grid_size < 16)
        throw std::invalid_argument("estimator grid_size must be a multiple of 8 and >= 16");
    ParamStore P;
    for (const auto& layer : kEstimatorLayers) {
        const int in_ch = layer.width_mul_in == 0 ? 1 : layer.width_mul_in * cfg.base_width;
        const int out_ch = layer.width_mul_out == 0 ? 1 : layer.width_mul_out * cfg.base_width;
        add_conv(P, layer.name, in_ch, out_ch, layer.kernel, rng);
        if (layer.width_mul_out != 0) add_bn(P, std::string(layer.name) + ".bn", out_ch);
    }
    return P;
}

Tensor estimator_forward(ParamStore& params, const EstimatorConfig& cfg, const Tensor& s,
                         bool training, bool smooth_activations) {
    if (s.shape().size() != 4 || s.dim(1) != 1 || s.dim(2) != cfg.grid_size || s.dim(3) != cfg.grid_size)
        throw std::invalid_argument("estimator input must be [N,1," + std::to_string(cfg.grid_size) +
                                    "," + std::to_string(cfg.grid_size) + "], got " +
                                    shape_str(s.shape()));
    Tensor h = s;
    for (const auto& layer : kEstimatorLayers) {
        if (layer.upsample_before) h = op::nearest_upsample2x(h);
        if (layer.width_mul_out == 0) {
            h = conv(params, layer.name, h, layer.stride);
            // nonnegative activity
            h = smooth_activations ? op::silu(h) : op::relu(h);
        } else {
            h = conv_bn_act(params, layer.name, h, layer.stride, training, smooth_activations);
        }
    }
    return h;
}

Tensor time_embedding(const std::vector<int>& t, int dim) {
    if (dim % 2 != 0) throw std::invalid_argument("time embedding dim must be even");
    const int half = dim / 2;
    const int n = static_cast<int>(t.size());
    std::vector<float> data(static_cast<std::size_t>(n) * dim);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < half; ++j) {
            const double freq = std::exp(-std::log(10000.0) * j / half);
            const double arg = static_cast<double>(t[static_cast<std::size_t>(i)]) * freq;
            data[static_cast<std::size_t>(i) * dim + j] = static_cast<float>(std::sin(arg));
            data[static_cast<std::size_t>(i) * dim + half + j] = static_cast<float>(std::cos(arg));
        }
    }
    return Tensor::from_data({n, dim}, std::move(data));
}

namespace {

int level_width(const DenoiserConfig& cfg, int level) { return cfg.base_width << level; }

void add_unet_block(ParamStore& P, const std::string& prefix, int in_ch, int out_ch,
                    const DenoiserConfig& cfg, Rng& rng) {
    add_conv(P, prefix + ".conv1", in_ch, out_ch, 3, rng);
    add_linear(P, prefix + ".tproj", cfg.temb_dim, out_ch, rng);
    add_gn(P, prefix + ".gn1", out_ch);
    add_conv(P, prefix + ".conv2", out_ch, out_ch, 3, rng);
    add_gn(P, prefix + ".gn2", out_ch);
}

Tensor unet_block(ParamStore& P, const std::string& prefix, const Tensor& x, const Tensor& temb,
                  const DenoiserConfig& cfg) {
    Tensor h = conv(P, prefix + ".conv1", x, 1);
    const int ch = h.dim(1);
    const int groups = pick_groups(ch, cfg.max_groups);
    Tensor tb = op::linear(temb, P.at(prefix + ".tproj.weight"), P.at(prefix + ".tproj.bias"));
    h = op::add_sample_channel_bias(h, tb);
    h = op::group_norm(h, P.at(prefix + ".gn1.gamma"), P.at(prefix + ".gn1.beta"), groups, 1e-5f);
    h = op::silu(h);
    h = conv(P, prefix + ".conv2", h, 1);
    h = op::group_norm(h, P.at(prefix + ".gn2.gamma"), P.at(prefix + ".gn2.beta"), groups, 1e-5f);
    return op::silu(h);
}

}  // namespace

ParamStore init_denoiser(const DenoiserConfig& cfg, Rng& rng) {
    if (cfg.levels < 1) throw std::invalid_argument("denoiser needs at least one level");
    const int down_factor = 1 << (cfg.levels - 1);
    if (cfg.grid_size % down_factor != 0)
        throw std::invalid_argument("denoiser grid_size must be divisible by 2^(levels-1)");
    ParamStore P;
    add_linear(P, "temb.trunk", cfg.temb_dim, cfg.temb_dim, rng);
    add_conv(P, "head", 2, cfg.base_width, 3, rng);
    for (int l = 0; l < cfg.levels; ++l) {
        const int ch = level_width(cfg, l);
        add_unet_block(P, "enc" + std::to_string(l), ch, ch, cfg, rng);
        if (l + 1 < cfg.levels) add_conv(P, "down" + std::to_string(l), ch, level_width(cfg, l + 1), 3, rng);
    }
    for (int l = cfg.levels - 2; l >= 0; --l) {
        const int ch = level_width(cfg, l);
        add_conv(P, "up" + std::to_string(l), level_width(cfg, l + 1), ch, 3, rng);
        add_unet_block(P, "dec" + std::to_string(l), 2 * ch, ch, cfg, rng);
    }
    // Zero-initialized output head: the untrained net predicts zero noise.
    add_conv(P, "out", cfg.base_width, 1, 3, rng, /*zero_init=*/true);
    return P;
}

Tensor denoiser_forward(ParamStore& params, const DenoiserConfig& cfg, const Tensor& r_t,
                        const std::vector<int>& t, const Tensor& cond) {
    if (r_t.shape() != cond.shape())
        throw std::invalid_argument("denoiser: r_t and condition shapes differ: " +
                                    shape_str(r_t.shape()) + " vs " + shape_str(cond.shape()));
    if (r_t.shape().size() != 4 || r_t.dim(1) != 1)
        throw std::invalid_argument("denoiser expects [N,1,H,W] inputs");
    if (static_cast<int>(t.size()) != r_t.dim(0))
        throw std::invalid_argument("denoiser: one timestep per batch sample required");

    Tensor temb = time_embedding(t, cfg.temb_dim);
    temb = op::silu(op::linear(temb, params.at("temb.trunk.weight"), params.at("temb.trunk.bias")));

    Tensor h = conv(params, "head", op::concat_channels(r_t, cond), 1);
    std::vector<Tensor> skips;
    for (int l = 0; l < cfg.levels; ++l) {
        h = unet_block(params, "enc" + std::to_string(l), h, temb, cfg);
        if (l + 1 < cfg.levels) {
            skips.push_back(h);
            h = conv(params, "down" + std::to_string(l), h, 2);
        }
    }
    for (int l = cfg.levels - 2; l >= 0; --l) {
        h = op::nearest_upsample2x(h);
        h = conv(params, "up" + std::to_string(l), h, 1);
        h = op::concat_channels(h, skips[static_cast<std::size_t>(l)]);
        h = unet_block(params, "dec" + std::to_string(l), h, temb, cfg);
    }
    return conv(params, "out", h, 1);
}

Tensor denoiser_forward(ParamStore& params, const DenoiserConfig& cfg, const Tensor& r_t, int t,
                        const Tensor& cond) {
    std::vector<int> ts(static_cast<std::size_t>(r_t.dim(0)), t);
    return denoiser_forward(params, cfg, r_t, ts, cond);
}

}  // namespace pmdm
