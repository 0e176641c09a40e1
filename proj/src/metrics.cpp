#include "pmdm/metrics.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace pmdm {

namespace {

void check_same(const ImageGrid& ref, const ImageGrid& pred, const char* op) {
    if (ref.width != pred.width || ref.height != pred.height)
        throw std::invalid_argument(std::string(op) + ": image shapes differ");
}

double mse_of(const ImageGrid& ref, const ImageGrid& pred) {
    double acc = 0.0;
    for (std::size_t i = 0; i < ref.values.size(); ++i) {
        const double d = static_cast<double>(ref.values[i]) - pred.values[i];
        acc += d * d;
    }
    return acc / static_cast<double>(ref.values.size());
}

}  // namespace

double psnr(const ImageGrid& ref, const ImageGrid& pred) {
    check_same(ref, pred, "psnr");
    const double peak = ref.max_value();
    if (peak <= 0.0) throw std::invalid_argument("psnr: reference has no positive peak");
    const double mse = mse_of(ref, pred);
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(peak * peak / mse);
}

double ssim(const ImageGrid& ref, const ImageGrid& pred) {
    check_same(ref, pred, "ssim");
    constexpr int kWindow = 11;
    constexpr double kSigma = 1.5;
    constexpr double kK1 = 0.01, kK2 = 0.03;
    if (ref.width < kWindow || ref.height < kWindow)
        throw std::invalid_argument("ssim: image smaller than the 11x11 window");

    double range = static_cast<double>(ref.max_value()) - ref.min_value();
    if (range <= 0.0) range = 1e-8;  // degenerate (constant) reference
    const double c1 = (kK1 * range) * (kK1 * range);
    const double c2 = (kK2 * range) * (kK2 * range);

    double w[kWindow][kWindow];
    double wsum = 0.0;
    for (int i = 0; i < kWindow; ++i) {
        for (int j = 0; j < kWindow; ++j) {
            const double dy = i - kWindow / 2, dx = j - kWindow / 2;
            w[i][j] = std::exp(-(dx * dx + dy * dy) / (2.0 * kSigma * kSigma));
            wsum += w[i][j];
        }
    }
    for (auto& row : w)
        for (auto& v : row) v /= wsum;

    double total = 0.0;
    std::size_t count = 0;
    for (int y = 0; y + kWindow <= ref.height; ++y) {
        for (int x = 0; x + kWindow <= ref.width; ++x) {
            double mu_r = 0.0, mu_p = 0.0;
            for (int i = 0; i < kWindow; ++i)
                for (int j = 0; j < kWindow; ++j) {
                    mu_r += w[i][j] * ref.at(y + i, x + j);
                    mu_p += w[i][j] * pred.at(y + i, x + j);
                }
            double var_r = 0.0, var_p = 0.0, cov = 0.0;
            for (int i = 0; i < kWindow; ++i)
                for (int j = 0; j < kWindow; ++j) {
                    const double dr = ref.at(y + i, x + j) - mu_r;
                    const double dp = pred.at(y + i, x + j) - mu_p;
                    var_r += w[i][j] * dr * dr;
                    var_p += w[i][j] * dp * dp;
                    cov += w[i][j] * dr * dp;
                }
            const double num = (2.0 * mu_r * mu_p + c1) * (2.0 * cov + c2);
            const double den = (mu_r * mu_r + mu_p * mu_p + c1) * (var_r + var_p + c2);
            total += num / den;
            ++count;
        }
    }
    return total / static_cast<double>(count);
}

double nrmse(const ImageGrid& ref, const ImageGrid& pred) {
    check_same(ref, pred, "nrmse");
    const double range = static_cast<double>(ref.max_value()) - ref.min_value();
    if (range <= 0.0) throw std::invalid_argument("nrmse: reference has zero dynamic range");
    return std::sqrt(mse_of(ref, pred)) / range;
}

ImageGrid error_map(const ImageGrid& ref, const ImageGrid& pred) {
    check_same(ref, pred, "error_map");
    ImageGrid out(ref.width, ref.height, ref.pixel_size_mm);
    for (std::size_t i = 0; i < out.values.size(); ++i) {
        const float d = ref.values[i] - pred.values[i];
        out.values[i] = d * d;
    }
    return out;
}

Decomposition decomposition_report(const std::vector<ImageGrid>& refs,
                                   const std::vector<ImageGrid>& means,
                                   const std::vector<ImageGrid>& samples) {
    if (refs.size() != means.size() || refs.size() != samples.size())
        throw std::invalid_argument("decomposition_report: list lengths differ");
    if (refs.empty()) throw std::invalid_argument("decomposition_report: empty lists");
    Decomposition d;
    for (std::size_t s = 0; s < refs.size(); ++s) {
        check_same(refs[s], means[s], "decomposition_report");
        check_same(refs[s], samples[s], "decomposition_report");
        double a = 0.0, b = 0.0, c = 0.0;
        for (std::size_t i = 0; i < refs[s].values.size(); ++i) {
            const double dm = static_cast<double>(refs[s].values[i]) - means[s].values[i];
            const double ms = static_cast<double>(means[s].values[i]) - samples[s].values[i];
            const double rs = static_cast<double>(refs[s].values[i]) - samples[s].values[i];
            a += dm * dm;
            b += ms * ms;
            c += rs * rs;
        }
        d.d_star += a;
        d.transport += b;
        d.total += c;
    }
    const double n = static_cast<double>(refs.size());
    d.d_star /= n;
    d.transport /= n;
    d.total /= n;
    d.residual = d.total > 0.0 ? std::fabs(d.total - d.d_star - d.transport) / d.total : 0.0;
    return d;
}

}  // namespace pmdm
