#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace pmdm {

using Shape = std::vector<int>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

/// One node of the reverse-mode tape. Leaves have no parents and no
/// backward_fn; op nodes capture whatever forward values their backward
/// pass needs inside the closure.
struct Node {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad;  // allocated lazily, same length as data
    bool requires_grad = false;
    const char* op = "leaf";

    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
    }
};

}  // namespace detail

/// Dense float32 n-d array with an optional autograd tape behind it.
/// Cheap to copy (shared handle). Shapes are row-major, innermost last.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    static Tensor full(const Shape& shape, float value, bool requires_grad = false);
    static Tensor from_data(const Shape& shape, std::vector<float> values,
                            bool requires_grad = false);
    static Tensor scalar(float value, bool requires_grad = false);

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const { return node().shape; }
    std::int64_t size() const { return node().size(); }
    int dim(int i) const { return node().shape.at(static_cast<std::size_t>(i)); }

    float* data() { return node().data.data(); }
    const float* data() const { return node().data.data(); }
    std::vector<float>& values() { return node().data; }
    const std::vector<float>& values() const { return node().data; }

    bool requires_grad() const { return node().requires_grad; }
    /// Only meaningful on leaves; flipping it on an op output would detach
    /// nothing, so that is rejected.
    void set_requires_grad(bool v);

    bool has_grad() const { return node().grad.size() == node().data.size(); }
    float* grad();
    const float* grad() const;
    std::vector<float>& grad_values();
    void zero_grad();

    float item() const;
    bool all_finite() const;

    /// Reverse-mode sweep from a scalar loss. Accumulates into leaf grads.
    void backward();

    /// Deep copy of the values only (fresh leaf, no tape history).
    Tensor clone_detached(bool requires_grad = false) const;

    detail::Node& node() {
        if (!n_) throw std::logic_error("use of undefined Tensor");
        return *n_;
    }
    const detail::Node& node() const {
        if (!n_) throw std::logic_error("use of undefined Tensor");
        return *n_;
    }
    const std::shared_ptr<detail::Node>& node_ptr() const { return n_; }
    static Tensor wrap(std::shared_ptr<detail::Node> n) {
        Tensor t;
        t.n_ = std::move(n);
        return t;
    }

private:
    std::shared_ptr<detail::Node> n_;
};

/// Counter-free splittable PRNG: xoshiro256++ seeded through splitmix64.
/// Same seed gives a bit-identical stream on a given build; split() derives
/// an independent child stream without advancing the parent.
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    std::uint64_t next_u64();
    /// Uniform in [0, 1), 53-bit resolution.
    double uniform();
    /// Standard normal via Box-Muller (one value per call, nothing cached).
    float normal();
    void fill_normal(float* out, std::size_t n);
    /// Uniform integer in [0, n), rejection-sampled (unbiased).
    std::uint64_t below(std::uint64_t n);
    /// Exact Poisson draw; inversion for small means, PTRD rejection above.
    std::int64_t poisson(double mean);

    Rng split(std::string_view label) const;
    Rng split_index(std::uint64_t index) const;

    std::array<std::uint64_t, 4> state() const { return s_; }
    static Rng from_state(const std::array<std::uint64_t, 4>& s);
    std::string state_hex() const;
    static Rng from_state_hex(const std::string& hex);

private:
    Rng() = default;
    std::array<std::uint64_t, 4> s_{};
};

}  // namespace pmdm
