#include <doctest.h>

#include <cmath>
#include <vector>

#include "helpers.hpp"
#include "pmdm/ops.hpp"

using namespace pmdm;
namespace op = pmdm::ops;
using testutil::analytic_directional;
using testutil::numeric_directional;
using testutil::rademacher;
using testutil::random_vec;
using testutil::rel_err;

namespace {

/// Direct six-nested-loop cross-correlation, the conv2d oracle.
std::vector<float> conv_reference(const std::vector<float>& x, int N, int C, int H, int W,
                                  const std::vector<float>& w, int K, int kh, int kw,
                                  const std::vector<float>& bias, int stride, int pad) {
    const int OH = (H + 2 * pad - kh) / stride + 1;
    const int OW = (W + 2 * pad - kw) / stride + 1;
    std::vector<float> out(static_cast<std::size_t>(N) * K * OH * OW, 0.0f);
    for (int n = 0; n < N; ++n)
        for (int k = 0; k < K; ++k)
            for (int oy = 0; oy < OH; ++oy)
                for (int ox = 0; ox < OW; ++ox) {
                    float acc = 0.0f;
                    for (int c = 0; c < C; ++c)
                        for (int ki = 0; ki < kh; ++ki)
                            for (int kj = 0; kj < kw; ++kj) {
                                const int iy = oy * stride - pad + ki;
                                const int ix = ox * stride - pad + kj;
                                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                                acc += x[((static_cast<std::size_t>(n) * C + c) * H + iy) * W + ix] *
                                       w[((static_cast<std::size_t>(k) * C + c) * kh + ki) * kw + kj];
                            }
                    out[((static_cast<std::size_t>(n) * K + k) * OH + oy) * OW + ox] = acc + bias[static_cast<std::size_t>(k)];
                }
    return out;
}

/// Directional gradient check for one leaf of a rebuildable loss.
void check_leaf_grad(Tensor& leaf, const std::function<Tensor()>& build_loss, Rng& rng,
                     double tol = 1e-3, float h = 1e-3f) {
    leaf.zero_grad();
    Tensor loss = build_loss();
    loss.backward();
    const auto dir = rademacher(rng, leaf.values().size());
    const double analytic = analytic_directional(leaf, dir);
    const double numeric =
        numeric_directional(leaf, dir, h, [&] { return static_cast<double>(build_loss().item()); });
    CAPTURE(analytic);
    CAPTURE(numeric);
    CHECK(rel_err(analytic, numeric) < tol);
}

}  // namespace

TEST_SUITE_BEGIN("ops");

TEST_CASE("conv2d: all-ones 3x3 with pad 1 sums to 9 in the center") {
    Tensor x = Tensor::full({1, 1, 3, 3}, 1.0f);
    Tensor w = Tensor::full({1, 1, 3, 3}, 1.0f);
    Tensor b = Tensor::zeros({1});
    Tensor y = op::conv2d(x, w, b, 1, 1);
    CHECK(y.values()[4] == doctest::Approx(9.0f));  // center
    CHECK(y.values()[0] == doctest::Approx(4.0f));  // corner
}

TEST_CASE("conv2d: identity kernel reproduces the input") {
    Rng rng(5);
    Tensor x = Tensor::from_data({2, 1, 5, 5}, random_vec(rng, 50));
    std::vector<float> kernel(9, 0.0f);
    kernel[4] = 1.0f;
    Tensor w = Tensor::from_data({1, 1, 3, 3}, kernel);
    Tensor y = op::conv2d(x, w, Tensor::zeros({1}), 1, 1);
    for (std::size_t i = 0; i < x.values().size(); ++i) CHECK(y.values()[i] == x.values()[i]);
}

TEST_CASE("conv2d: random case matches the six-loop oracle under 1e-6") {
    Rng rng(99);
    const auto xv = random_vec(rng, 2 * 3 * 8 * 8);
    const auto wv = random_vec(rng, 4 * 3 * 3 * 3);
    const auto bv = random_vec(rng, 4);
    Tensor x = Tensor::from_data({2, 3, 8, 8}, xv);
    Tensor w = Tensor::from_data({4, 3, 3, 3}, wv);
    Tensor b = Tensor::from_data({4}, bv);
    Tensor y = op::conv2d(x, w, b, 1, 1);
    const auto ref = conv_reference(xv, 2, 3, 8, 8, wv, 4, 3, 3, bv, 1, 1);
    REQUIRE(y.values().size() == ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i)
        CHECK(rel_err(y.values()[i], ref[i]) < 1e-6);
}

TEST_CASE("conv2d: 100 random shape/stride/padding cases match the oracle") {
    Rng rng(314159);
    for (int trial = 0; trial < 100; ++trial) {
        const int N = 1 + static_cast<int>(rng.below(2));
        const int C = 1 + static_cast<int>(rng.below(3));
        const int K = 1 + static_cast<int>(rng.below(4));
        const int k = 1 + 2 * static_cast<int>(rng.below(3));  // 1, 3, 5
        const int stride = 1 + static_cast<int>(rng.below(2));
        const int pad = static_cast<int>(rng.below(static_cast<std::uint64_t>(k / 2 + 1)));
        const int H = k + static_cast<int>(rng.below(8));
        const int W = k + static_cast<int>(rng.below(8));
        const auto xv = random_vec(rng, static_cast<std::size_t>(N) * C * H * W);
        const auto wv = random_vec(rng, static_cast<std::size_t>(K) * C * k * k);
        const auto bv = random_vec(rng, static_cast<std::size_t>(K));
        Tensor y = op::conv2d(Tensor::from_data({N, C, H, W}, xv), Tensor::from_data({K, C, k, k}, wv),
                              Tensor::from_data({K}, bv), stride, pad);
        const auto ref = conv_reference(xv, N, C, H, W, wv, K, k, k, bv, stride, pad);
        REQUIRE(y.values().size() == ref.size());
        for (std::size_t i = 0; i < ref.size(); ++i) {
            REQUIRE(rel_err(y.values()[i], ref[i]) < 1e-5);
        }
    }
}

TEST_CASE("conv2d rejects bad geometry") {
    Tensor x = Tensor::zeros({1, 2, 4, 4});
    Tensor w = Tensor::zeros({1, 3, 3, 3});
    CHECK_THROWS_AS(op::conv2d(x, w, Tensor::zeros({1}), 1, 1), std::invalid_argument);
    Tensor w2 = Tensor::zeros({1, 2, 2, 2});  // even kernel
    CHECK_THROWS_AS(op::conv2d(x, w2, Tensor::zeros({1}), 1, 0), std::invalid_argument);
    Tensor w3 = Tensor::zeros({1, 2, 3, 3});
    CHECK_THROWS_AS(op::conv2d(x, w3, Tensor::zeros({1}), 1, 2), std::invalid_argument);
}

TEST_CASE("nearest_upsample2x replicates pixels into 2x2 blocks") {
    Tensor x = Tensor::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor y = op::nearest_upsample2x(x);
    const std::vector<float> expect = {1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
    CHECK(y.values() == expect);

    Tensor c = Tensor::full({1, 2, 3, 3}, 7.5f);
    Tensor yc = op::nearest_upsample2x(c);
    for (float v : yc.values()) CHECK(v == 7.5f);

    Rng rng(3);
    Tensor r = Tensor::from_data({1, 1, 4, 4}, random_vec(rng, 16));
    Tensor yr = op::nearest_upsample2x(r);
    for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j)
            CHECK(yr.values()[static_cast<std::size_t>(i) * 8 + j] ==
                  r.values()[static_cast<std::size_t>(i / 2) * 4 + j / 2]);
}

TEST_CASE("batch_norm2d basics") {
    Rng rng(11);
    const int N = 4, C = 3, H = 5, W = 5;
    Tensor gamma = Tensor::full({C}, 1.0f);
    Tensor beta = Tensor::zeros({C});
    Tensor rm = Tensor::zeros({C});
    Tensor rv = Tensor::full({C}, 1.0f);

    SUBCASE("zero-mean unit-variance input passes through") {
        // Build a per-channel standardized input.
        std::vector<float> data = random_vec(rng, static_cast<std::size_t>(N) * C * H * W);
        for (int c = 0; c < C; ++c) {
            double mean = 0.0, var = 0.0;
            const std::size_t m = static_cast<std::size_t>(N) * H * W;
            for (int n = 0; n < N; ++n)
                for (int i = 0; i < H * W; ++i)
                    mean += data[(static_cast<std::size_t>(n) * C + c) * H * W + i];
            mean /= static_cast<double>(m);
            for (int n = 0; n < N; ++n)
                for (int i = 0; i < H * W; ++i) {
                    const double d = data[(static_cast<std::size_t>(n) * C + c) * H * W + i] - mean;
                    var += d * d;
                }
            var /= static_cast<double>(m);
            for (int n = 0; n < N; ++n)
                for (int i = 0; i < H * W; ++i) {
                    auto& v = data[(static_cast<std::size_t>(n) * C + c) * H * W + i];
                    v = static_cast<float>((v - mean) / std::sqrt(var));
                }
        }
        Tensor x = Tensor::from_data({N, C, H, W}, data);
        Tensor y = op::batch_norm2d(x, gamma, beta, rm, rv, 0.1f, 1e-8f, true);
        for (std::size_t i = 0; i < data.size(); ++i)
            CHECK(y.values()[i] == doctest::Approx(data[i]).epsilon(1e-5));
    }

    SUBCASE("gamma=0 collapses to beta broadcast") {
        Tensor x = Tensor::from_data({N, C, H, W}, random_vec(rng, static_cast<std::size_t>(N) * C * H * W));
        Tensor g0 = Tensor::zeros({C});
        Tensor b = Tensor::from_data({C}, {0.5f, -1.0f, 2.0f});
        Tensor y = op::batch_norm2d(x, g0, b, rm, rv, 0.1f, 1e-5f, true);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int i = 0; i < H * W; ++i)
                    CHECK(y.values()[(static_cast<std::size_t>(n) * C + c) * H * W + i] ==
                          b.values()[static_cast<std::size_t>(c)]);
    }

    SUBCASE("train mode yields per-channel mean 0 variance 1") {
        Tensor x = Tensor::from_data({N, C, H, W},
                                     random_vec(rng, static_cast<std::size_t>(N) * C * H * W, -3.0f, 5.0f));
        Tensor y = op::batch_norm2d(x, gamma, beta, rm, rv, 0.1f, 1e-8f, true);
        for (int c = 0; c < C; ++c) {
            double mean = 0.0, var = 0.0;
            const std::size_t m = static_cast<std::size_t>(N) * H * W;
            for (int n = 0; n < N; ++n)
                for (int i = 0; i < H * W; ++i)
                    mean += y.values()[(static_cast<std::size_t>(n) * C + c) * H * W + i];
            mean /= static_cast<double>(m);
            for (int n = 0; n < N; ++n)
                for (int i = 0; i < H * W; ++i) {
                    const double d = y.values()[(static_cast<std::size_t>(n) * C + c) * H * W + i] - mean;
                    var += d * d;
                }
            var /= static_cast<double>(m);
            CHECK(std::fabs(mean) < 1e-5);
            CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
        }
    }

    SUBCASE("train mode requires more than one element per channel") {
        Tensor x = Tensor::zeros({1, C, 1, 1});
        CHECK_THROWS_AS(op::batch_norm2d(x, gamma, beta, rm, rv, 0.1f, 1e-5f, true),
                        std::invalid_argument);
    }
}

TEST_CASE("activation and reduction values") {
    Tensor x = Tensor::from_data({2}, {-1.0f, 2.0f});
    Tensor r = op::relu(x);
    CHECK(r.values()[0] == 0.0f);
    CHECK(r.values()[1] == 2.0f);

    Tensor lr = op::leaky_relu(x, 0.1f);
    CHECK(lr.values()[0] == doctest::Approx(-0.1f));
    CHECK(lr.values()[1] == 2.0f);

    Tensor s = op::silu(Tensor::from_data({1}, {0.0f}));
    CHECK(s.values()[0] == 0.0f);

    Rng rng(8);
    Tensor any = Tensor::from_data({7}, random_vec(rng, 7));
    CHECK(op::mse(any, any).item() == 0.0f);
    CHECK(op::mse(Tensor::zeros({2}), Tensor::full({2}, 1.0f)).item() == doctest::Approx(1.0f));
    CHECK(op::mean_all(Tensor::from_data({4}, {1, 2, 3, 4})).item() == doctest::Approx(2.5f));
    CHECK_THROWS_AS(op::mse(Tensor::zeros({2}), Tensor::zeros({3})), std::invalid_argument);
}

TEST_CASE("finite-difference gradients for every differentiable op") {
    Rng rng(4242);
    Rng dir_rng(17);

    SUBCASE("conv2d wrt input, weight, and bias") {
        Tensor x = Tensor::from_data({2, 2, 6, 6}, random_vec(rng, 144), true);
        Tensor w = Tensor::from_data({3, 2, 3, 3}, random_vec(rng, 54), true);
        Tensor b = Tensor::from_data({3}, random_vec(rng, 3), true);
        Tensor y = Tensor::from_data({2, 3, 3, 3}, random_vec(rng, 54));
        auto loss = [&] { return op::mse(op::conv2d(x, w, b, 2, 1), y); };
        check_leaf_grad(w, loss, dir_rng);
        check_leaf_grad(x, loss, dir_rng);
        check_leaf_grad(b, loss, dir_rng);
    }

    SUBCASE("linear wrt all leaves") {
        Tensor x = Tensor::from_data({4, 6}, random_vec(rng, 24), true);
        Tensor w = Tensor::from_data({3, 6}, random_vec(rng, 18), true);
        Tensor b = Tensor::from_data({3}, random_vec(rng, 3), true);
        Tensor y = Tensor::from_data({4, 3}, random_vec(rng, 12));
        auto loss = [&] { return op::mse(op::linear(x, w, b), y); };
        check_leaf_grad(x, loss, dir_rng);
        check_leaf_grad(w, loss, dir_rng);
        check_leaf_grad(b, loss, dir_rng);
    }

    SUBCASE("elementwise chain: silu(mul(add(x,y), leaky_relu(x)))") {
        Tensor x = Tensor::from_data({3, 4}, random_vec(rng, 12), true);
        Tensor y = Tensor::from_data({3, 4}, random_vec(rng, 12), true);
        auto loss = [&] {
            return op::mean_all(op::silu(op::mul(op::add(x, y), op::leaky_relu(x, 0.2f))));
        };
        check_leaf_grad(x, loss, dir_rng);
        check_leaf_grad(y, loss, dir_rng);
    }

    SUBCASE("sub and scale") {
        Tensor x = Tensor::from_data({5}, random_vec(rng, 5), true);
        Tensor y = Tensor::from_data({5}, random_vec(rng, 5), true);
        auto loss = [&] { return op::mean_all(op::mul(op::scale(op::sub(x, y), 1.7f), op::sub(x, y))); };
        check_leaf_grad(x, loss, dir_rng);
        check_leaf_grad(y, loss, dir_rng);
    }

    SUBCASE("relu at random inputs away from the kink") {
        // keep |x| >= 0.1 so the h=1e-3 stencil never straddles zero
        std::vector<float> vals = random_vec(rng, 16, 0.1f, 1.0f);
        for (std::size_t i = 0; i < vals.size(); ++i)
            if (rng.uniform() < 0.5) vals[i] = -vals[i];
        Tensor x = Tensor::from_data({4, 4}, vals, true);
        Tensor y = Tensor::from_data({4, 4}, random_vec(rng, 16));
        auto loss = [&] { return op::mse(op::relu(x), y); };
        check_leaf_grad(x, loss, dir_rng);
    }

    SUBCASE("nearest_upsample2x") {
        Tensor x = Tensor::from_data({1, 2, 3, 3}, random_vec(rng, 18), true);
        Tensor y = Tensor::from_data({1, 2, 6, 6}, random_vec(rng, 72));
        auto loss = [&] { return op::mse(op::nearest_upsample2x(x), y); };
        check_leaf_grad(x, loss, dir_rng);
    }

    SUBCASE("concat_channels both sides") {
        Tensor a = Tensor::from_data({2, 2, 3, 3}, random_vec(rng, 36), true);
        Tensor b = Tensor::from_data({2, 1, 3, 3}, random_vec(rng, 18), true);
        Tensor y = Tensor::from_data({2, 3, 3, 3}, random_vec(rng, 54));
        auto loss = [&] { return op::mse(op::concat_channels(a, b), y); };
        check_leaf_grad(a, loss, dir_rng);
        check_leaf_grad(b, loss, dir_rng);
    }

    SUBCASE("add_sample_channel_bias") {
        Tensor x = Tensor::from_data({2, 3, 4, 4}, random_vec(rng, 96), true);
        Tensor bias = Tensor::from_data({2, 3}, random_vec(rng, 6), true);
        Tensor y = Tensor::from_data({2, 3, 4, 4}, random_vec(rng, 96));
        auto loss = [&] { return op::mse(op::add_sample_channel_bias(x, bias), y); };
        check_leaf_grad(x, loss, dir_rng);
        check_leaf_grad(bias, loss, dir_rng);
    }

    SUBCASE("batch_norm2d train mode wrt x, gamma, beta") {
        Tensor x = Tensor::from_data({3, 2, 4, 4}, random_vec(rng, 96), true);
        Tensor gamma = Tensor::from_data({2}, {1.2f, 0.7f}, true);
        Tensor beta = Tensor::from_data({2}, {0.1f, -0.4f}, true);
        Tensor rm = Tensor::zeros({2});
        Tensor rv = Tensor::full({2}, 1.0f);
        Tensor y = Tensor::from_data({3, 2, 4, 4}, random_vec(rng, 96));
        auto loss = [&] { return op::mse(op::batch_norm2d(x, gamma, beta, rm, rv, 0.1f, 1e-5f, true), y); };
        check_leaf_grad(x, loss, dir_rng, 2e-3);
        check_leaf_grad(gamma, loss, dir_rng);
        check_leaf_grad(beta, loss, dir_rng);
    }

    SUBCASE("batch_norm2d eval mode wrt x") {
        Tensor x = Tensor::from_data({2, 2, 3, 3}, random_vec(rng, 36), true);
        Tensor gamma = Tensor::from_data({2}, {1.2f, 0.7f}, true);
        Tensor beta = Tensor::from_data({2}, {0.1f, -0.4f}, true);
        Tensor rm = Tensor::from_data({2}, {0.2f, -0.1f});
        Tensor rv = Tensor::from_data({2}, {1.5f, 0.8f});
        Tensor y = Tensor::from_data({2, 2, 3, 3}, random_vec(rng, 36));
        auto loss = [&] { return op::mse(op::batch_norm2d(x, gamma, beta, rm, rv, 0.1f, 1e-5f, false), y); };
        check_leaf_grad(x, loss, dir_rng);
        check_leaf_grad(gamma, loss, dir_rng);
    }

    SUBCASE("group_norm wrt x, gamma, beta") {
        Tensor x = Tensor::from_data({2, 4, 4, 4}, random_vec(rng, 128), true);
        Tensor gamma = Tensor::from_data({4}, random_vec(rng, 4, 0.5f, 1.5f), true);
        Tensor beta = Tensor::from_data({4}, random_vec(rng, 4), true);
        Tensor y = Tensor::from_data({2, 4, 4, 4}, random_vec(rng, 128));
        auto loss = [&] { return op::mse(op::group_norm(x, gamma, beta, 2, 1e-5f), y); };
        check_leaf_grad(x, loss, dir_rng, 2e-3);
        check_leaf_grad(gamma, loss, dir_rng);
        check_leaf_grad(beta, loss, dir_rng);
    }
}

TEST_CASE("group_norm validates group divisibility") {
    Tensor x = Tensor::zeros({1, 6, 2, 2});
    Tensor g = Tensor::full({6}, 1.0f);
    Tensor b = Tensor::zeros({6});
    CHECK_THROWS_AS(op::group_norm(x, g, b, 4, 1e-5f), std::invalid_argument);
    CHECK_NOTHROW(op::group_norm(x, g, b, 3, 1e-5f));
}

TEST_SUITE_END();
