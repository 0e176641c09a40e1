#include <doctest.h>

#include <cmath>
#include <set>

#include "helpers.hpp"
#include "pmdm/ops.hpp"
#include "pmdm/tensor.hpp"

using namespace pmdm;
namespace op = pmdm::ops;

TEST_SUITE_BEGIN("tensor");

TEST_CASE("shape bookkeeping and invariants") {
    Tensor t = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t.size() == 6);
    CHECK(t.shape() == Shape{2, 3});
    CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1, 2, 3}), std::invalid_argument);
    CHECK_THROWS_AS((void)Tensor::zeros({0, 3}), std::invalid_argument);
    CHECK(t.all_finite());
    t.values()[2] = std::nanf("");
    CHECK_FALSE(t.all_finite());
}

TEST_CASE("backward: loss = mean(x^2) gives 2x/n") {
    Tensor x = Tensor::from_data({2}, {1.0f, 2.0f}, true);
    Tensor loss = op::mean_all(op::mul(x, x));
    loss.backward();
    CHECK(x.grad()[0] == doctest::Approx(1.0f));  // 2*1/2
    CHECK(x.grad()[1] == doctest::Approx(2.0f));  // 2*2/2
}

TEST_CASE("backward requires scalar loss") {
    Tensor x = Tensor::from_data({2}, {1.0f, 2.0f}, true);
    Tensor y = op::mul(x, x);
    CHECK_THROWS_AS(y.backward(), std::invalid_argument);
}

TEST_CASE("grad accumulation doubles without zeroing") {
    Tensor x = Tensor::from_data({3}, {0.5f, -1.0f, 2.0f}, true);
    auto run = [&] {
        Tensor loss = op::mse(x, Tensor::zeros({3}));
        loss.backward();
    };
    run();
    std::vector<float> once(x.grad(), x.grad() + 3);
    run();
    for (int i = 0; i < 3; ++i) CHECK(x.grad()[i] == doctest::Approx(2.0f * once[static_cast<std::size_t>(i)]));
    x.zero_grad();
    run();
    for (int i = 0; i < 3; ++i) CHECK(x.grad()[i] == doctest::Approx(once[static_cast<std::size_t>(i)]));
}

TEST_CASE("diamond graph accumulates each edge exactly once") {
    // y = relu(x) + x*x shares x twice; d/dx = 1[x>0] + 2x, exact equality.
    Tensor x = Tensor::from_data({4}, {0.5f, -0.75f, 2.0f, -0.25f}, true);
    Tensor shared = op::mul(x, x);
    Tensor joined = op::add(op::relu(x), shared);
    Tensor loss = op::mean_all(joined);
    loss.backward();
    for (int i = 0; i < 4; ++i) {
        const float v = x.values()[static_cast<std::size_t>(i)];
        const float expect = ((v > 0.0f ? 1.0f : 0.0f) + 2.0f * v) / 4.0f;
        CHECK(x.grad()[i] == doctest::Approx(expect));
    }
}

TEST_CASE("disconnected leaves keep zero grads without error") {
    Tensor x = Tensor::from_data({2}, {1.0f, 1.0f}, true);
    Tensor other = Tensor::from_data({2}, {3.0f, 4.0f}, true);
    Tensor loss = op::mean_all(x);
    loss.backward();
    CHECK(other.grad()[0] == 0.0f);
    CHECK(other.grad()[1] == 0.0f);
}

TEST_CASE("rng: identical seed, identical stream; splits are independent") {
    Rng a(1234), b(1234);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

    Rng parent(77);
    Rng c1 = parent.split("noise");
    Rng c2 = parent.split("weights");
    Rng c1_again = parent.split("noise");
    CHECK(c1.next_u64() == c1_again.next_u64());
    std::set<std::uint64_t> seen;
    Rng c1b = parent.split("noise");
    Rng c2b = parent.split("weights");
    for (int i = 0; i < 32; ++i) {
        seen.insert(c1b.next_u64());
        seen.insert(c2b.next_u64());
    }
    CHECK(seen.size() == 64);  // no stream collisions in a short window
}

TEST_CASE("rng: state round-trips through hex") {
    Rng a(99);
    a.next_u64();
    a.normal();
    Rng b = Rng::from_state_hex(a.state_hex());
    for (int i = 0; i < 16; ++i) CHECK(a.next_u64() == b.next_u64());
}

TEST_CASE("rng: normal moments and poisson exactness checks") {
    Rng rng(2024);
    const int n = 200000;
    double sum = 0.0, sq = 0.0;
    for (int i = 0; i < n; ++i) {
        const double v = rng.normal();
        sum += v;
        sq += v * v;
    }
    const double mean = sum / n;
    const double var = sq / n - mean * mean;
    CHECK(std::fabs(mean) < 4.0 / std::sqrt(static_cast<double>(n)));
    CHECK(std::fabs(var - 1.0) < 4.0 * std::sqrt(2.0 / n));

    // Poisson: both regimes (inversion < 10 <= PTRD) match mean/variance.
    for (double lambda : {0.5, 4.0, 25.0, 400.0}) {
        Rng prng(static_cast<std::uint64_t>(lambda * 1000) + 7);
        const int m = 40000;
        double s = 0.0, s2 = 0.0;
        for (int i = 0; i < m; ++i) {
            const double k = static_cast<double>(prng.poisson(lambda));
            s += k;
            s2 += k * k;
        }
        const double pm = s / m;
        const double pv = s2 / m - pm * pm;
        CHECK(std::fabs(pm - lambda) < 5.0 * std::sqrt(lambda / m));
        CHECK(std::fabs(pv - lambda) < 6.0 * lambda * std::sqrt(2.0 / m) + 0.05 * lambda);
    }
    CHECK(Rng(5).poisson(0.0) == 0);
    CHECK_THROWS_AS(Rng(5).poisson(-1.0), std::invalid_argument);
}

TEST_SUITE_END();
