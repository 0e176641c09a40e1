#include "pmdm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <unordered_set>

namespace pmdm {

std::int64_t numel(const Shape& shape) {
    std::int64_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw std::invalid_argument("non-positive extent in shape " + shape_str(shape));
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
    return full(shape, 0.0f, requires_grad);
}

Tensor Tensor::full(const Shape& shape, float value, bool requires_grad) {
    auto n = std::make_shared<detail::Node>();
    n->shape = shape;
    n->data.assign(static_cast<std::size_t>(numel(shape)), value);
    n->requires_grad = requires_grad;
    if (requires_grad) n->ensure_grad();
    return wrap(std::move(n));
}

Tensor Tensor::from_data(const Shape& shape, std::vector<float> values, bool requires_grad) {
    if (static_cast<std::int64_t>(values.size()) != numel(shape))
        throw std::invalid_argument("data length " + std::to_string(values.size()) +
                                    " does not match shape " + shape_str(shape));
    auto n = std::make_shared<detail::Node>();
    n->shape = shape;
    n->data = std::move(values);
    n->requires_grad = requires_grad;
    if (requires_grad) n->ensure_grad();
    return wrap(std::move(n));
}

Tensor Tensor::scalar(float value, bool requires_grad) {
    return from_data({1}, {value}, requires_grad);
}

void Tensor::set_requires_grad(bool v) {
    auto& n = node();
    if (v && n.backward_fn)
        throw std::logic_error("cannot turn a tape-internal tensor into a trainable leaf");
    n.requires_grad = v;
    if (v) n.ensure_grad();
}

float* Tensor::grad() {
    node().ensure_grad();
    return node().grad.data();
}

const float* Tensor::grad() const {
    if (!has_grad()) throw std::logic_error("grad not allocated");
    return node().grad.data();
}

std::vector<float>& Tensor::grad_values() {
    node().ensure_grad();
    return node().grad;
}

void Tensor::zero_grad() {
    auto& n = node();
    n.ensure_grad();
    std::fill(n.grad.begin(), n.grad.end(), 0.0f);
}

float Tensor::item() const {
    if (size() != 1) throw std::invalid_argument("item() on non-scalar tensor " + shape_str(shape()));
    return node().data[0];
}

bool Tensor::all_finite() const {
    for (float v : node().data)
        if (!std::isfinite(v)) return false;
    return true;
}

Tensor Tensor::clone_detached(bool requires_grad) const {
    return from_data(shape(), node().data, requires_grad);
}

void Tensor::backward() {
    auto& root = node();
    if (root.size() != 1)
        throw std::invalid_argument("backward() requires a scalar loss, got " + shape_str(root.shape));
    if (!root.requires_grad) return;  // nothing on the tape requires grad

    // Reverse topological order by iterative post-order DFS. Each node is
    // visited exactly once, so shared subexpressions accumulate each edge's
    // contribution exactly once.
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    struct Frame {
        detail::Node* node;
        std::size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({&root, 0});
    seen.insert(&root);
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.node->parents.size()) {
            detail::Node* p = f.node->parents[f.next_parent++].get();
            if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }

    root.ensure_grad();
    root.grad[0] += 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* n = *it;
        if (n->backward_fn) n->backward_fn(*n);
    }
}

// ---------------------------------------------------------------------------
// Rng

namespace {

inline std::uint64_t splitmix64(std::uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (char c : s) {
        h ^= static_cast<std::uint8_t>(c);
        h *= 1099511628211ULL;
    }
    return h;
}

}  // namespace

Rng::Rng(std::uint64_t seed) {
    std::uint64_t x = seed;
    for (auto& w : s_) w = splitmix64(x);
}

std::uint64_t Rng::next_u64() {
    const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
}

double Rng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

float Rng::normal() {
    // u1 in (0,1] so the log is finite.
    double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    return static_cast<float>(r * std::cos(6.283185307179586476925287 * u2));
}

void Rng::fill_normal(float* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = normal();
}

std::uint64_t Rng::below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("below(0)");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t v;
    do {
        v = next_u64();
    } while (v >= limit);
    return v % n;
}

std::int64_t Rng::poisson(double mean) {
    if (mean < 0.0 || !std::isfinite(mean)) throw std::invalid_argument("poisson mean must be finite and >= 0");
    if (mean == 0.0) return 0;
    if (mean < 10.0) {
        // Knuth multiplication method.
        const double limit = std::exp(-mean);
        double prod = 1.0;
        std::int64_t k = -1;
        do {
            ++k;
            prod *= uniform();
        } while (prod > limit);
        return k;
    }
    // Hoermann's PTRD transformed-rejection sampler, exact for mean >= 10.
    const double smu = std::sqrt(mean);
    const double b = 0.931 + 2.53 * smu;
    const double a = -0.059 + 0.02483 * b;
    const double inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    const double vr = 0.9277 - 3.6224 / (b - 2.0);
    const double log_mu = std::log(mean);
    for (;;) {
        double u = uniform() - 0.5;
        double v = uniform();
        double us = 0.5 - std::fabs(u);
        double kf = std::floor((2.0 * a / us + b) * u + mean + 0.43);
        if (us >= 0.07 && v <= vr) return static_cast<std::int64_t>(kf);
        if (kf < 0.0 || (us < 0.013 && v > us)) continue;
        double k = kf;
        double lhs = std::log(v * inv_alpha / (a / (us * us) + b));
        double rhs = k * log_mu - mean - std::lgamma(k + 1.0);
        if (lhs <= rhs) return static_cast<std::int64_t>(kf);
    }
}

Rng Rng::split(std::string_view label) const {
    std::uint64_t mix = s_[0] ^ rotl(s_[1], 13) ^ rotl(s_[2], 29) ^ rotl(s_[3], 43);
    std::uint64_t x = mix ^ fnv1a64(label);
    return Rng(splitmix64(x));
}

Rng Rng::split_index(std::uint64_t index) const {
    std::uint64_t mix = s_[0] ^ rotl(s_[1], 13) ^ rotl(s_[2], 29) ^ rotl(s_[3], 43);
    std::uint64_t x = mix ^ (0xd1342543de82ef95ULL * (index + 1));
    return Rng(splitmix64(x));
}

Rng Rng::from_state(const std::array<std::uint64_t, 4>& s) {
    Rng r;
    r.s_ = s;
    return r;
}

std::string Rng::state_hex() const {
    char buf[4 * 16 + 4];
    std::snprintf(buf, sizeof(buf), "%016llx:%016llx:%016llx:%016llx",
                  static_cast<unsigned long long>(s_[0]), static_cast<unsigned long long>(s_[1]),
                  static_cast<unsigned long long>(s_[2]), static_cast<unsigned long long>(s_[3]));
    return buf;
}

Rng Rng::from_state_hex(const std::string& hex) {
    std::array<std::uint64_t, 4> s{};
    unsigned long long w[4];
    if (std::sscanf(hex.c_str(), "%llx:%llx:%llx:%llx", &w[0], &w[1], &w[2], &w[3]) != 4)
        throw std::runtime_error("malformed rng state: " + hex);
    for (int i = 0; i < 4; ++i) s[static_cast<std::size_t>(i)] = w[i];
    return from_state(s);
}

}  // namespace pmdm
